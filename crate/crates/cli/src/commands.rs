use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use vpl_core::corpus::{ingest_commit, list_commit_dirs, read_commit_dir, read_dataset, write_dataset};
use vpl_core::eval::{
    emit_reports, evaluate as score, read_records, read_report_records, write_records, MetricsReport,
    PredictionRecord, ReportFormat,
};
use vpl_core::judge::{verbalize, Verdict, RULE_TRANSPORT_ERROR};
use vpl_core::llm::{run_batch, BackendConfig, ChatBackend, ChatCompletionsBackend, MockBackend, ResponseCache};
use vpl_core::promptkit::{
    bundled_catalog, compose, load_catalog, ComposeOptions, PromptStrategy, RetrievalSource,
};
use vpl_core::retrieval::{build_index, LexicalEmbedder, RetrievalIndex};
use vpl_core::{seeded, Dataset, Split};

use crate::config::{BackendKind, Settings};

/// What a command did, for the exit code and the console.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    fn warn(&mut self, line: impl Into<String>) {
        let line = line.into();
        log::warn!("{line}");
        self.warnings.push(line);
    }
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.jsonl")
}

pub fn index_path(out: &Path) -> PathBuf {
    out.join("index.jsonl")
}

pub fn embedder_path(out: &Path) -> PathBuf {
    out.join("embedder.json")
}

pub fn predictions_path(out: &Path, tag: &str) -> PathBuf {
    out.join("predictions").join(format!("{}.jsonl", slug(tag)))
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

/// File-name form of a strategy tag: `P+A4(3)` -> `P_A4-3`.
pub fn slug(tag: &str) -> String {
    tag.replace('+', "_").replace('(', "-").replace(')', "")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn build_dataset(s: &Settings) -> Result<Outcome> {
    let root = s
        .commits
        .as_deref()
        .ok_or_else(|| anyhow!("build-dataset needs --commits <dir> or commits= in the config"))?;
    let mut out = Outcome::default();
    let mut samples = Vec::new();
    for dir in list_commit_dirs(root)? {
        let input = read_commit_dir(&dir)?;
        let ingested = ingest_commit(&input, s.seed)?;
        for d in &ingested.diagnostics {
            if d.message.starts_with(&input.commit) {
                out.warn(d.to_string());
            } else {
                out.warn(format!("{}: {d}", input.commit));
            }
        }
        samples.extend(ingested.samples);
    }
    if samples.is_empty() {
        bail!("no samples extracted from {}", root.display());
    }
    let mut ds = Dataset::new(samples);
    ds.metadata.insert("balanced".into(), "true".into());
    ds.metadata.insert("seed".into(), s.seed.to_string());
    ds.validate()?;
    create_dir(&s.out)?;
    let path = dataset_path(&s.out);
    write_dataset(&ds, &path)?;
    for split in Split::ALL {
        let (v, n) = ds.class_counts(split);
        out.say(format!("{split}: {v} vulnerable, {n} non-vulnerable"));
    }
    out.say(format!("wrote {}", path.display()));
    Ok(out)
}

pub fn index(s: &Settings) -> Result<Outcome> {
    let ds = read_dataset(&dataset_path(&s.out))?;
    let train = ds.subset(Split::Train);
    if train.is_empty() {
        bail!("the dataset has no training samples to index");
    }
    let embedder = LexicalEmbedder::fit(train.samples.iter().map(|x| x.code.as_str()));
    let idx = build_index(&train, &embedder)?;
    embedder.save(&embedder_path(&s.out))?;
    idx.save(&index_path(&s.out))?;
    let mut out = Outcome::default();
    out.say(format!(
        "indexed {} training samples ({} terms) into {}",
        idx.len(),
        embedder.dim(),
        index_path(&s.out).display()
    ));
    Ok(out)
}

#[derive(Debug, Default)]
pub struct PredictSummary {
    pub outcome: Outcome,
    /// Prompts that still needed an answer.
    pub requested: usize,
    /// Answers served from the response cache.
    pub cached: usize,
    pub failed: usize,
    pub records: usize,
}

/// The configured backend plus the model name recorded for it.
pub fn make_backend(s: &Settings) -> Result<(Box<dyn ChatBackend>, BackendConfig)> {
    let mut cfg = s.llm.clone();
    match s.backend {
        BackendKind::Mock => {
            let mock = MockBackend::new(s.seed).with_noise(s.mock_noise);
            cfg.model_name = mock.model_name();
            Ok((Box::new(mock), cfg))
        }
        BackendKind::Live => {
            let backend = ChatCompletionsBackend::from_env(cfg.base_url.clone(), cfg.request_timeout);
            Ok((Box::new(backend), cfg))
        }
    }
}

fn done_key(r: &PredictionRecord) -> (String, u32) {
    (r.sample_id.clone(), r.run)
}

/// Composes, sends and records one prediction per (target, run).
///
/// Existing answered records are kept and their prompts skipped, so an
/// interrupted run resumes where it stopped. Records that only hold a
/// transport error are retried.
pub fn predict(s: &Settings, backend: &dyn ChatBackend, cfg: &BackendConfig) -> Result<PredictSummary> {
    let ds = read_dataset(&dataset_path(&s.out))?;
    let train = ds.subset(Split::Train);
    let mut targets: Vec<_> = ds.split(s.split).collect();
    if let Some(limit) = s.limit {
        targets.truncate(limit);
    }
    if targets.is_empty() {
        bail!("no {} samples to predict", s.split);
    }
    let strategy = PromptStrategy::parse_tag(&s.strategy, s.seed)?;
    let tag = strategy.tag();

    let retrieval_parts = if strategy.retrieved_k > 0 {
        let embedder = LexicalEmbedder::load(&embedder_path(&s.out)).context("run `index` first")?;
        let idx = RetrievalIndex::load(&index_path(&s.out), &embedder).context("run `index` first")?;
        Some((embedder, idx))
    } else {
        None
    };
    let retrieval = retrieval_parts.as_ref().map(|(embedder, index)| RetrievalSource { index, embedder });
    let catalog = match (&s.catalog, strategy.use_cwe_examples) {
        (_, false) => Vec::new(),
        (Some(path), true) => load_catalog(path)?,
        (None, true) => bundled_catalog(),
    };
    let opts = ComposeOptions {
        budget: s.budget,
        completion_allowance: s.completion_allowance,
        ..Default::default()
    };

    let path = predictions_path(&s.out, &tag);
    let mut kept: Vec<PredictionRecord> = if path.exists() {
        read_records(&path)?
            .into_iter()
            .filter(|r| r.verdict.matched_rule != RULE_TRANSPORT_ERROR)
            .collect()
    } else {
        Vec::new()
    };
    if let Some(other) = kept.iter().find(|r| r.prompt_strategy_tag != tag) {
        bail!("{} holds records for {}, not {tag}", path.display(), other.prompt_strategy_tag);
    }
    let done: BTreeSet<(String, u32)> = kept.iter().map(done_key).collect();

    let mut summary = PredictSummary::default();
    let mut pending = Vec::new();
    for run in 0..s.repeats {
        // each repeat draws its own random examples
        let run_strategy = PromptStrategy {
            seed: seeded::derive_seed(s.seed, &format!("run{run}")),
            ..strategy
        };
        for target in &targets {
            if done.contains(&(target.id.clone(), run)) {
                continue;
            }
            match compose(&run_strategy, target, &train, retrieval, &catalog, &opts) {
                Ok(prompt) => {
                    if prompt.target_truncated {
                        summary.outcome.warn(format!("{}: target code truncated to fit the budget", target.id));
                    }
                    pending.push((run, *target, prompt.messages()));
                }
                Err(e) => summary.outcome.warn(format!("{}: {e}", target.id)),
            }
        }
    }

    create_dir(&s.out.join("predictions"))?;
    let cache = ResponseCache::new(s.out.join("cache")).context("opening the response cache")?;
    let requests: Vec<_> = pending.iter().map(|(_, _, m)| m.clone()).collect();
    let answers = run_batch(&requests, cfg, backend, Some(&cache));
    summary.requested = requests.len();
    for ((run, target, _), answer) in pending.iter().zip(answers) {
        let (verdict, fingerprint) = match answer {
            Ok(a) => {
                summary.cached += usize::from(a.cached);
                (verbalize(&a.content), a.backend_fingerprint)
            }
            Err(e) => {
                summary.failed += 1;
                summary.outcome.warn(format!("{} run {run}: {e}", target.id));
                (Verdict::transport_error(&e.to_string()), cfg.model_name.clone())
            }
        };
        kept.push(PredictionRecord {
            sample_id: target.id.clone(),
            gold: target.label,
            verdict,
            prompt_strategy_tag: tag.clone(),
            backend_fingerprint: fingerprint,
            run: *run,
        });
    }
    kept.sort_by(|a, b| (a.run, &a.sample_id).cmp(&(b.run, &b.sample_id)));
    write_records(&kept, &path)?;
    summary.records = kept.len();
    summary.outcome.say(format!(
        "{tag}: {} prompts ({} cached, {} failed); {} records in {}",
        summary.requested,
        summary.cached,
        summary.failed,
        summary.records,
        path.display()
    ));
    Ok(summary)
}

/// Scores every predictions file under `out/predictions`.
pub fn evaluate(s: &Settings) -> Result<Outcome> {
    let dir = s.out.join("predictions");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}; run `predict` first", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no prediction files in {}", dir.display());
    }
    let reports = reports_dir(&s.out);
    create_dir(&reports)?;
    let mut out = Outcome::default();
    for file in files {
        let records = read_records(&file)?;
        let failed = records
            .iter()
            .filter(|r| r.verdict.matched_rule == RULE_TRANSPORT_ERROR)
            .count();
        if failed > 0 {
            out.warn(format!("{}: {failed} records hold transport errors and count as unknown", file.display()));
        }
        for e in score(&records, s.unknown_policy)? {
            let averaged = vec![(e.strategy_tag.clone(), e.averaged.clone())];
            let per_run: Vec<(String, MetricsReport)> = e
                .runs
                .iter()
                .map(|(run, _, r)| (format!("{} run {run}", e.strategy_tag), r.clone()))
                .collect();
            for partial in &e.averaged.partial {
                out.warn(format!("{}: {partial} is undefined in some runs", e.strategy_tag));
            }
            let table = emit_reports(&averaged, ReportFormat::Table);
            let text = format!(
                "Mean over {} run(s):\n{table}\nPer run:\n{}\nPooled over runs:\n{}",
                e.runs.len(),
                emit_reports(&per_run, ReportFormat::Table),
                emit_reports(&[(e.strategy_tag.clone(), e.pooled.clone())], ReportFormat::Table),
            );
            let base = reports.join(slug(&e.strategy_tag));
            write(&base.with_extension("txt"), &text)?;
            write(&base.with_extension("jsonl"), &emit_reports(&averaged, ReportFormat::Records))?;
            out.say(table.trim_end().to_string());
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// One table over every strategy report in `out/reports`.
pub fn compare(s: &Settings) -> Result<Outcome> {
    let dir = reports_dir(&s.out);
    let mut rows: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}; run `evaluate` first", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    for file in files {
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        for (tag, report) in read_report_records(&text).with_context(|| format!("in {}", file.display()))? {
            rows.insert(tag, report);
        }
    }
    if rows.is_empty() {
        bail!("no reports in {}", dir.display());
    }
    let rows: Vec<_> = rows.into_iter().collect();
    let table = emit_reports(&rows, ReportFormat::Table);
    write(&dir.join("compare.txt"), &table)?;
    let mut out = Outcome::default();
    out.say(table.trim_end().to_string());
    Ok(out)
}
