//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so every line is printed and a failure does not hide the rest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use vpl_cli::{build_dataset, evaluate, index, predict, Settings};
use vpl_core::corpus::{
    extract_functions, ingest_commit, label_functions, language_for_path, list_commit_dirs, read_commit_dir,
    read_dataset, CodeSample, Dataset, Label, Split,
};
use vpl_core::eval::{confusion, emit_report, f_beta, metrics, read_report_records, PredictionRecord, ReportFormat};
use vpl_core::judge::{verbalize, Class};
use vpl_core::llm::{run_batch, BackendConfig, ChatCompletionsBackend, MockBackend, VULN_MARKER};
use vpl_core::promptkit::{
    bundled_catalog, compose, estimate_tokens, load_catalog, ComposeOptions, PromptStrategy, RetrievalSource,
};
use vpl_core::retrieval::{build_index, top_k, Embedder, LexicalEmbedder};
use vpl_core::seeded;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn core_tests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 -------------------------------------------------------------------------

fn metric_formula_consistency() -> Check {
    // (row, precision, recall, printed F1, printed F0.5), percentages
    let rows = [
        ("GPT-3.5 P+A4+A5", 76.3, 36.8, 49.7, 62.8),
        ("GPT-3.5 P+A5 K=5", 63.2, 47.2, 54.0, 59.2),
        ("GPT-3.5 P+A4 K=3", 65.8, 41.2, 50.2, 58.4),
        ("CodeBERT", 62.3, 53.3, 57.3, 60.1),
        ("GPT-4 P+A3", 73.7, 79.3, 76.4, 74.8),
    ];
    let mut failures = Vec::new();
    for (row, p, r, f1, f05) in rows {
        let got1 = 100.0 * f_beta(Some(p / 100.0), Some(r / 100.0), 1.0).unwrap();
        let got05 = 100.0 * f_beta(Some(p / 100.0), Some(r / 100.0), 0.5).unwrap();
        for (name, got, printed) in [("F1", got1, f1), ("F0.5", got05, f05)] {
            if (got - printed).abs() > 0.15 {
                failures.push(format!("{row} {name}: computed {got:.3}, printed {printed}"));
            }
        }
    }
    if failures.is_empty() {
        Ok("all five rows within 0.15 pp".into())
    } else {
        Err(failures.join("; "))
    }
}

// 2 -------------------------------------------------------------------------

fn all_negative_baseline() -> Check {
    let records: Vec<PredictionRecord> = (0..368)
        .map(|i| PredictionRecord {
            sample_id: format!("s{i}"),
            gold: if i < 184 { Label::Vulnerable } else { Label::NonVulnerable },
            verdict: verbalize("this code is non-vulnerable"),
            prompt_strategy_tag: "P".into(),
            backend_fingerprint: "constant".into(),
            run: 0,
        })
        .collect();
    let cm = confusion(&records, Default::default()).map_err(|e| e.to_string())?;
    let m = metrics(&cm).ok_or("empty matrix")?;
    ensure(m.accuracy == 0.5 && m.recall == Some(0.0), || format!("{m:?}"))?;
    ensure(m.precision.is_none() && m.f1.is_none() && m.f0_5.is_none(), || format!("{m:?}"))?;
    let table = emit_report(&m, "P", ReportFormat::Table);
    let row = "| P | 50.0 | Nan | 0.0 | Nan | Nan | 0 | 368 |";
    ensure(table.contains(row), || format!("table was {table:?}"))?;
    Ok(row.into())
}

// 3 -------------------------------------------------------------------------

fn synthetic_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded::rng(seed);
    let words: Vec<String> = (0..150).map(|i| format!("w{i}")).collect();
    let mut codes: Vec<String> = Vec::new();
    for i in 0..n {
        let code = if i >= 10 && i % 10 == 0 {
            codes[seeded::uniform_index(&mut rng, i)].clone()
        } else {
            let len = 3 + seeded::uniform_index(&mut rng, 22);
            let body: Vec<&str> = (0..len)
                .map(|_| words[seeded::uniform_index(&mut rng, words.len())].as_str())
                .collect();
            format!("int f() {{ return {}; }}", body.join(" + "))
        };
        codes.push(code);
    }
    Dataset::new(
        codes
            .into_iter()
            .enumerate()
            .map(|(i, code)| CodeSample {
                id: format!("syn/{i:04}/f.c:1"),
                code,
                label: if i % 2 == 0 { Label::Vulnerable } else { Label::NonVulnerable },
                project: "syn".into(),
                filename: "f.c".into(),
                commit: format!("{i:04}"),
                language: "c".into(),
                split: Split::Train,
            })
            .collect(),
    )
}

fn oracle_tokens(code: &str) -> Vec<String> {
    code.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

fn retrieval_oracle() -> Check {
    let ds = synthetic_corpus(1000, 3);
    let emb = LexicalEmbedder::fit(ds.samples.iter().map(|s| s.code.as_str()));
    let index = build_index(&ds, &emb).map_err(|e| e.to_string())?;

    // independent TF-IDF and cosine
    let n = ds.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for s in &ds.samples {
        for t in oracle_tokens(&s.code).into_iter().collect::<HashSet<_>>() {
            *df.entry(t).or_default() += 1.0;
        }
    }
    let vector = |text: &str| {
        let mut v: BTreeMap<String, f64> = BTreeMap::new();
        for t in oracle_tokens(text) {
            if let Some(d) = df.get(&t) {
                *v.entry(t).or_default() += ((1.0 + n) / (1.0 + d)).ln() + 1.0;
            }
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        v.values_mut().for_each(|x| *x /= norm);
        v
    };
    let docs: Vec<BTreeMap<String, f64>> = ds.samples.iter().map(|s| vector(&s.code)).collect();

    // every other query is a sample with an exact duplicate in the corpus
    let mut queries: Vec<String> = (0..50).map(|i| ds.samples[i * 20 + (i % 2) * 7].code.clone()).collect();
    queries.push("int g() { return w1 + w7 + w7 + w42; }".into());
    let mut ties = 0;
    for q in &queries {
        let qv = vector(q);
        let mut ranked: Vec<(usize, f64)> = docs
            .iter()
            .map(|d| d.iter().map(|(k, x)| x * qv.get(k).copied().unwrap_or(0.0)).sum::<f64>())
            .enumerate()
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if ranked[0].1 == ranked[1].1 {
            ties += 1;
        }
        let query = emb.embed(q).map_err(|e| e.to_string())?;
        for k in [1, 3, 5] {
            let got: Vec<String> = top_k(&index, &query, k)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|h| h.id)
                .collect();
            let want: Vec<String> = ranked[..k].iter().map(|(i, _)| ds.samples[*i].id.clone()).collect();
            ensure(got == want, || format!("k={k} query {q:?}: got {got:?}, want {want:?}"))?;
        }
    }
    ensure(ties > 0, || "no tied queries in the fixture".into())?;
    Ok(format!("{} queries x k in {{1,3,5}} over 1000 samples, {ties} with tied leaders", queries.len()))
}

// 4 -------------------------------------------------------------------------

fn prompt_goldens() -> Check {
    let fixtures = core_tests().join("fixtures");
    let ds = read_dataset(&fixtures.join("prompt_dataset.jsonl")).map_err(|e| e.to_string())?;
    let train = ds.subset(Split::Train);
    let target = ds.split(Split::Test).next().ok_or("fixture has no target")?.clone();
    let catalog = load_catalog(&fixtures.join("prompt_catalog.jsonl")).map_err(|e| e.to_string())?;
    let emb = LexicalEmbedder::fit(train.samples.iter().map(|s| s.code.as_str()));
    let index = build_index(&train, &emb).map_err(|e| e.to_string())?;
    let src = RetrievalSource {
        index: &index,
        embedder: &emb,
    };
    let tags = ["P", "P+A1", "P+A2", "P+A3", "P+A4(3)", "P+A5(3)", "P+A4(3)+A5(3)"];
    for tag in tags {
        let strategy = PromptStrategy::parse_tag(tag, 7).map_err(|e| e.to_string())?;
        let text = compose(&strategy, &target, &train, Some(src), &catalog, &ComposeOptions::default())
            .map_err(|e| e.to_string())?
            .user_text;
        let golden = fs::read_to_string(core_tests().join(format!("goldens/{tag}.txt"))).map_err(|e| e.to_string())?;
        ensure(text == golden, || format!("{tag} differs from its golden"))?;
    }
    Ok(format!("{} strategies byte-identical", tags.len()))
}

// 5 -------------------------------------------------------------------------

fn budget_safety() -> Check {
    let mut rng = seeded::rng(5);
    let train = Dataset::new(
        (0..40)
            .map(|i| {
                let reps = 1 + seeded::uniform_index(&mut rng, 400);
                CodeSample {
                    id: format!("b/{i}/f.c:1"),
                    code: format!("int f{i}(int v) {{ {} return v; }}", "v = v * 3 + 1; ".repeat(reps)),
                    label: if i % 2 == 0 { Label::Vulnerable } else { Label::NonVulnerable },
                    project: "b".into(),
                    filename: "f.c".into(),
                    commit: i.to_string(),
                    language: "c".into(),
                    split: Split::Train,
                }
            })
            .collect(),
    );
    let emb = LexicalEmbedder::fit(train.samples.iter().map(|s| s.code.as_str()));
    let index = build_index(&train, &emb).map_err(|e| e.to_string())?;
    let src = RetrievalSource {
        index: &index,
        embedder: &emb,
    };
    let catalog = bundled_catalog();
    let opts = ComposeOptions::default();
    let limit = 4096 - 256;
    let base_text = "Now you need to identify whether a method contains a vulnerability or not. If has any potential \
vulnerability, output: 'this code is vulnerable'. Otherwise, output: 'this code is non-vulnerable'.\nThe code is ";
    let mut truncated = 0;
    for case in 0..1000 {
        let flag = |rng: &mut seeded::SeededRng| seeded::uniform_index(rng, 2) == 1;
        let strategy = PromptStrategy {
            use_role: flag(&mut rng),
            use_project_info: flag(&mut rng),
            use_cwe_examples: flag(&mut rng),
            random_k: seeded::uniform_index(&mut rng, 17),
            retrieved_k: seeded::uniform_index(&mut rng, 17),
            seed: case,
        };
        let len = 1 + seeded::uniform_index(&mut rng, 40_000);
        let code: String = "if (x) y[i] = z; ".chars().cycle().take(len).collect();
        let target = CodeSample {
            id: format!("target/{case}"),
            code,
            split: Split::Test,
            ..train.samples[0].clone()
        };
        let p = compose(&strategy, &target, &train, Some(src), &catalog, &opts)
            .map_err(|e| format!("case {case} ({}): {e}", strategy.tag()))?;
        let total = estimate_tokens(&p.system_text) + estimate_tokens(&p.user_text);
        ensure(total <= limit, || format!("case {case}: {total} tokens > {limit}"))?;
        ensure(p.user_text.contains(base_text) && p.user_text.ends_with(". Let's start:"), || {
            format!("case {case}: base task text damaged")
        })?;
        truncated += usize::from(p.target_truncated);
    }
    Ok(format!("1000 random prompts within {limit} tokens ({truncated} needed target truncation)"))
}

// 6 -------------------------------------------------------------------------

fn corpus_oracle() -> Check {
    let root = core_tests().join("fixtures/commits");
    let dirs = list_commit_dirs(&root).map_err(|e| e.to_string())?;
    ensure(dirs.len() == 5, || format!("{} commit dirs", dirs.len()))?;
    let mut got: BTreeMap<String, (String, String)> = BTreeMap::new();
    for dir in &dirs {
        let input = read_commit_dir(dir).map_err(|e| e.to_string())?;
        for s in ingest_commit(&input, 42).map_err(|e| e.to_string())?.samples {
            got.insert(s.id, (s.label.to_string(), s.split.to_string()));
        }
    }
    let expected: BTreeMap<String, (String, String)> = fs::read_to_string(root.join("expected.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let field = |k: &str| v[k].as_str().unwrap().to_string();
            (field("id"), (field("label"), field("split")))
        })
        .collect();
    ensure(got == expected, || format!("got {got:?}"))?;
    let positives = got.values().filter(|(l, _)| l == "vulnerable").count();
    ensure(positives * 2 == got.len(), || "unbalanced".into())?;

    let mut checked = 0;
    for dir in &dirs {
        let input = read_commit_dir(dir).map_err(|e| e.to_string())?;
        for (file, changed) in &input.changed_lines {
            let (Some(lang), Some(src)) = (language_for_path(file), input.pre_image_files.get(file)) else {
                continue;
            };
            let spans = extract_functions(src, lang).spans;
            let before: Vec<Label> = label_functions(&spans, changed).into_iter().map(|l| l.label).collect();
            for extra in 1..=src.lines().count() {
                let mut more: BTreeSet<usize> = changed.clone();
                more.insert(extra);
                let after = label_functions(&spans, &more);
                for (b, a) in before.iter().zip(&after) {
                    ensure(!(*b == Label::Vulnerable && a.label == Label::NonVulnerable), || {
                        format!("{file}: adding line {extra} unlabeled a function")
                    })?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{} samples match; monotonicity held for {checked} grown change sets", got.len()))
}

// 7 -------------------------------------------------------------------------

/// Ten commits of one file with four functions each. Functions 0 and 2 are
/// changed by the fix, 1 and 3 are not. Commits 6..9 form the test split.
fn write_e2e_fixture(root: &Path, marked: &BTreeSet<(usize, usize)>) {
    for c in 0..10 {
        let dir = root.join(format!("commit{c:02}"));
        fs::create_dir_all(dir.join("pre")).unwrap();
        let split = if c < 6 { "train" } else { "test" };
        fs::write(
            dir.join("meta.json"),
            format!(r#"{{"project":"e2e","commit":"e{c:02}","split":"{split}"}}"#),
        )
        .unwrap();
        let mut lines: Vec<String> = Vec::new();
        let mut diff = String::from("--- a/m.c\n+++ b/m.c\n");
        for j in 0..4 {
            lines.push(format!("int m{c}_{j}(int *p, int n)"));
            lines.push("{".into());
            lines.push(format!("    int s = {};", c * 10 + j));
            if marked.contains(&(c, j)) {
                lines.push(format!("    {VULN_MARKER}"));
            }
            lines.push("    s += p[n];".into());
            if j % 2 == 0 {
                let at = lines.len();
                diff.push_str(&format!("@@ -{at},1 +{at},1 @@\n-    s += p[n];\n+    s += n < LEN ? p[n] : 0;\n"));
            }
            lines.push("    return s;".into());
            lines.push("}".into());
            lines.push(String::new());
        }
        fs::write(dir.join("pre/m.c"), lines.join("\n")).unwrap();
        fs::write(dir.join("fix.diff"), diff).unwrap();
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["dataset.jsonl", "index.jsonl", "embedder.json", "predictions", "reports"] {
        let path = dir.join(sub);
        if path.is_dir() {
            for entry in fs::read_dir(&path).unwrap() {
                let p = entry.unwrap().path();
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        } else {
            out.insert(path.clone(), fs::read(&path).unwrap());
        }
    }
    out
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commits = tmp.path().join("commits");
    // test split: vulnerable functions are (c, 0) and (c, 2) for c in 6..10
    let marked: BTreeSet<(usize, usize)> = [(6, 0), (6, 2), (7, 0), (7, 2), (8, 0), (9, 1), (1, 0), (2, 3)].into();
    write_e2e_fixture(&commits, &marked);

    let settings = Settings::resolve(
        None,
        &[
            ("out".into(), tmp.path().join("out").display().to_string()),
            ("commits".into(), commits.display().to_string()),
            ("seed".into(), "17".into()),
            ("strategy".into(), "P+A4(2)+A5(2)".into()),
            ("repeats".into(), "2".into()),
        ],
    )
    .map_err(|e| e.to_string())?;
    let built = build_dataset(&settings).map_err(|e| format!("{e:#}"))?;
    ensure(built.warnings.is_empty(), || format!("{:?}", built.warnings))?;
    let ds = read_dataset(&settings.out.join("dataset.jsonl")).map_err(|e| e.to_string())?;
    ensure(ds.len() == 40, || format!("{} samples", ds.len()))?;
    index(&settings).map_err(|e| format!("{e:#}"))?;

    let run = || -> Result<usize, String> {
        let mock = MockBackend::new(settings.seed);
        let cfg = BackendConfig {
            model_name: mock.model_name(),
            ..settings.llm.clone()
        };
        predict(&settings, &mock, &cfg).map_err(|e| format!("{e:#}"))?;
        evaluate(&settings).map_err(|e| format!("{e:#}"))?;
        Ok(mock.calls())
    };
    let first_calls = run()?;
    ensure(first_calls == 32, || format!("first run made {first_calls} calls, expected 16 targets x 2 runs"))?;

    // hand count on the test split: marked vulnerable (6,0) (6,2) (7,0) (7,2) (8,0);
    // unmarked vulnerable (8,2) (9,0) (9,2); marked clean (9,1); 7 other clean
    let (tp, fn_, fp, tn) = (5.0, 3.0, 1.0, 7.0);
    let oracle = [
        ("accuracy", (tp + tn) / 16.0),
        ("precision", tp / (tp + fp)),
        ("recall", tp / (tp + fn_)),
        ("f1", 2.0 * tp / (2.0 * tp + fp + fn_)),
        ("f0_5", 1.25 * tp / (1.25 * tp + 0.25 * fn_ + fp)),
    ];
    let report_text =
        fs::read_to_string(settings.out.join("reports/P_A4-2_A5-2.jsonl")).map_err(|e| e.to_string())?;
    let reports = read_report_records(&report_text).map_err(|e| e.to_string())?;
    let (tag, report) = reports.first().ok_or("empty report")?;
    ensure(tag == "P+A4(2)+A5(2)" && report.n == 16, || format!("{tag} n={}", report.n))?;
    for (name, want) in oracle {
        let got = match name {
            "accuracy" => Some(report.accuracy),
            "precision" => report.precision,
            "recall" => report.recall,
            "f1" => report.f1,
            _ => report.f0_5,
        };
        ensure(got.is_some_and(|g| (g - want).abs() < 1e-12), || format!("{name}: got {got:?}, want {want}"))?;
    }

    let before = snapshot(&settings.out);
    let rerun_calls = run()?;
    ensure(rerun_calls == 0, || format!("rerun made {rerun_calls} calls"))?;
    ensure(snapshot(&settings.out) == before, || "rerun changed artifacts".into())?;

    // without the records, the response cache alone must avoid new calls
    fs::remove_dir_all(settings.out.join("predictions")).map_err(|e| e.to_string())?;
    let cached_calls = run()?;
    ensure(cached_calls == 0, || format!("cache-only rerun made {cached_calls} calls"))?;
    ensure(snapshot(&settings.out) == before, || "cache-only rerun changed artifacts".into())?;
    Ok("40 samples, 2 repeats; metrics equal the hand count; reruns byte-identical with 0 calls".into())
}

// 8 -------------------------------------------------------------------------

fn live_smoke() -> Check {
    const NOTE: &str = "published GPT-3.5/GPT-4 scores are not reproducible offline (closed models, API cost, model \
drift); only formula consistency and report formatting are checked";
    let Some(_) = std::env::var("VPL_API_KEY").ok().filter(|k| !k.is_empty()) else {
        return Ok(format!("live smoke skipped (VPL_API_KEY unset); {NOTE}"));
    };
    let cfg = BackendConfig {
        base_url: std::env::var("VPL_BASE_URL").unwrap_or_else(|_| BackendConfig::default().base_url),
        max_retries: 1,
        request_timeout: Duration::from_secs(60),
        ..Default::default()
    };
    let backend = ChatCompletionsBackend::from_env(cfg.base_url.clone(), cfg.request_timeout);
    let fixtures = core_tests().join("fixtures");
    let ds = read_dataset(&fixtures.join("prompt_dataset.jsonl")).map_err(|e| e.to_string())?;
    let prompts: Vec<_> = ds
        .samples
        .iter()
        .take(5)
        .map(|s| {
            compose(&PromptStrategy::base(0), s, &Dataset::default(), None, &[], &ComposeOptions::default())
                .map(|p| p.messages())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let answers = run_batch(&prompts, &cfg, &backend, None);
    let mut classes = Vec::new();
    for a in answers {
        let a = a.map_err(|e| format!("live call failed: {e}"))?;
        classes.push(verbalize(&a.content).class);
    }
    let known = classes.iter().filter(|c| **c != Class::Unknown).count();
    Ok(format!("live smoke: {known}/5 answers verbalized; {NOTE}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("metric formula consistency", metric_formula_consistency),
        ("all-negative baseline", all_negative_baseline),
        ("retrieval oracle equivalence", retrieval_oracle),
        ("prompt goldens", prompt_goldens),
        ("budget safety", budget_safety),
        ("corpus oracle", corpus_oracle),
        ("end-to-end offline run", end_to_end),
        ("non-reproducibility note and live smoke", live_smoke),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} PASS  {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL  {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
