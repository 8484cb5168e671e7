//! Binary classification scoring with vulnerable as the positive class.
//!
//! Undefined ratios (precision with no positive predictions, and so on) are
//! `None`, never a floating NaN, and render as `Nan` in tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::judge::{Class, Verdict};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to score")]
    Empty,
    #[error("sample {0:?} appears more than once in one run")]
    DuplicateSample(String),
    #[error("no reports to average")]
    NoReports,
    #[error("reports cover different sample counts: {0:?}")]
    MismatchedN(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub gold: Label,
    pub verdict: Verdict,
    pub prompt_strategy_tag: String,
    pub backend_fingerprint: String,
    /// Repeat index, starting at 0.
    pub run: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnknownPolicy {
    /// Unknown counts as a non-vulnerable prediction.
    #[default]
    AsNegative,
    AsPositive,
    /// Unknown records are left out of the matrix.
    Drop,
}

impl FromStr for UnknownPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as-negative" => Ok(UnknownPolicy::AsNegative),
            "as-positive" => Ok(UnknownPolicy::AsPositive),
            "drop" => Ok(UnknownPolicy::Drop),
            other => Err(format!(
                "unknown policy {other:?} (expected as-negative, as-positive or drop)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Unknown verdicts seen, whatever the policy did with them.
    pub unknown: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self { tp, fp, fn_, tn, unknown: 0 }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
            unknown: self.unknown + other.unknown,
        }
    }

    fn count(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Vulnerable, Label::Vulnerable) => self.tp += 1,
            (Label::NonVulnerable, Label::Vulnerable) => self.fp += 1,
            (Label::Vulnerable, Label::NonVulnerable) => self.fn_ += 1,
            (Label::NonVulnerable, Label::NonVulnerable) => self.tn += 1,
        }
    }
}

/// Counts one run's records. Sample ids must be unique.
pub fn confusion(records: &[PredictionRecord], policy: UnknownPolicy) -> Result<ConfusionMatrix, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut seen = HashSet::new();
    let mut cm = ConfusionMatrix::default();
    for r in records {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(EvalError::DuplicateSample(r.sample_id.clone()));
        }
        let predicted = match (r.verdict.class.label(), policy) {
            (Some(label), _) => label,
            (None, UnknownPolicy::AsNegative) => Label::NonVulnerable,
            (None, UnknownPolicy::AsPositive) => Label::Vulnerable,
            (None, UnknownPolicy::Drop) => {
                cm.unknown += 1;
                continue;
            }
        };
        if r.verdict.class == Class::Unknown {
            cm.unknown += 1;
        }
        cm.count(r.gold, predicted);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub f0_5: Option<f64>,
    pub unknown_count: usize,
    pub n: usize,
    /// Metrics that were undefined in some, but not all, averaged runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial: Vec<String>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `(1 + b^2) P R / (b^2 P + R)`; undefined if either input is, or both are 0.
pub fn f_beta(precision: Option<f64>, recall: Option<f64>, beta: f64) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    if p == 0.0 && r == 0.0 {
        return None;
    }
    let b2 = beta * beta;
    Some((1.0 + b2) * p * r / (b2 * p + r))
}

/// Scores a matrix. Returns `None` for an empty matrix.
pub fn metrics(cm: &ConfusionMatrix) -> Option<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return None;
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    Some(MetricsReport {
        accuracy: (cm.tp + cm.tn) as f64 / n as f64,
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        f0_5: f_beta(precision, recall, 0.5),
        unknown_count: cm.unknown,
        n,
        partial: Vec::new(),
    })
}

/// Mean of each metric over the runs where it is defined.
pub fn average_runs(reports: &[MetricsReport]) -> Result<MetricsReport, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    if reports.iter().any(|r| r.n != first.n) {
        return Err(EvalError::MismatchedN(reports.iter().map(|r| r.n).collect()));
    }
    let runs = reports.len();
    let mut partial = Vec::new();
    let mut mean_defined = |name: &str, pick: fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
        let defined: Vec<f64> = reports.iter().filter_map(pick).collect();
        if !defined.is_empty() && defined.len() < runs {
            partial.push(name.to_string());
        }
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let precision = mean_defined("precision", |r| r.precision);
    let recall = mean_defined("recall", |r| r.recall);
    let f1 = mean_defined("f1", |r| r.f1);
    let f0_5 = mean_defined("f0_5", |r| r.f0_5);
    let unknown_sum: usize = reports.iter().map(|r| r.unknown_count).sum();
    Ok(MetricsReport {
        accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / runs as f64,
        precision,
        recall,
        f1,
        f0_5,
        // half-up rounding of the mean
        unknown_count: (2 * unknown_sum + runs) / (2 * runs),
        n: first.n,
        partial,
    })
}

/// Per-run and averaged scores for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub strategy_tag: String,
    pub runs: Vec<(u32, ConfusionMatrix, MetricsReport)>,
    /// Mean of per-run metrics.
    pub averaged: MetricsReport,
    /// Metrics of all runs' predictions pooled into one matrix.
    pub pooled: MetricsReport,
}

/// Groups records by strategy tag and run, scores each run and averages.
pub fn evaluate(records: &[PredictionRecord], policy: UnknownPolicy) -> Result<Vec<Evaluation>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<&str, BTreeMap<u32, Vec<PredictionRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.prompt_strategy_tag.as_str())
            .or_default()
            .entry(r.run)
            .or_default()
            .push(r.clone());
    }
    let mut out = Vec::new();
    for (tag, runs) in groups {
        let mut scored = Vec::new();
        let mut pooled = ConfusionMatrix::default();
        for (run, recs) in runs {
            let cm = confusion(&recs, policy)?;
            pooled = pooled.add(&cm);
            let report = metrics(&cm).ok_or(EvalError::Empty)?;
            scored.push((run, cm, report));
        }
        let reports: Vec<_> = scored.iter().map(|(_, _, r)| r.clone()).collect();
        out.push(Evaluation {
            strategy_tag: tag.to_string(),
            averaged: average_runs(&reports)?,
            pooled: metrics(&pooled).ok_or(EvalError::Empty)?,
            runs: scored,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Records,
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn pct_or_nan(v: Option<f64>) -> String {
    v.map_or_else(|| "Nan".to_string(), pct)
}

/// Renders rows sorted by strategy tag.
pub fn emit_reports(rows: &[(String, MetricsReport)], format: ReportFormat) -> String {
    let mut rows: Vec<&(String, MetricsReport)> = rows.iter().collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            out.push_str("| Prompt | Accuracy | Precision | Recall | F1 | F0.5 | Unknown | N |\n");
            out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
            for (tag, r) in rows {
                let _ = writeln!(
                    out,
                    "| {tag} | {} | {} | {} | {} | {} | {} | {} |",
                    pct(r.accuracy),
                    pct_or_nan(r.precision),
                    pct_or_nan(r.recall),
                    pct_or_nan(r.f1),
                    pct_or_nan(r.f0_5),
                    r.unknown_count,
                    r.n
                );
            }
        }
        ReportFormat::Records => {
            for (tag, r) in rows {
                let line = ReportLine {
                    strategy_tag: tag.clone(),
                    report: r.clone(),
                };
                out.push_str(&serde_json::to_string(&line).expect("report serializes"));
                out.push('\n');
            }
        }
    }
    out
}

pub fn emit_report(report: &MetricsReport, strategy_tag: &str, format: ReportFormat) -> String {
    emit_reports(&[(strategy_tag.to_string(), report.clone())], format)
}

#[derive(Serialize, Deserialize)]
struct ReportLine {
    strategy_tag: String,
    #[serde(flatten)]
    report: MetricsReport,
}

/// Reads what [`emit_reports`] writes in [`ReportFormat::Records`].
pub fn read_report_records(text: &str) -> Result<Vec<(String, MetricsReport)>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: ReportLine = serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok((line.strategy_tag, line.report))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    sample_id: String,
    gold: Label,
    verdict_class: Class,
    matched_rule: String,
    strategy_tag: String,
    backend_fingerprint: String,
    run: u32,
    #[serde(default)]
    raw_excerpt: String,
}

pub fn record_to_line(r: &PredictionRecord) -> String {
    serde_json::to_string(&RecordLine {
        sample_id: r.sample_id.clone(),
        gold: r.gold,
        verdict_class: r.verdict.class,
        matched_rule: r.verdict.matched_rule.clone(),
        strategy_tag: r.prompt_strategy_tag.clone(),
        backend_fingerprint: r.backend_fingerprint.clone(),
        run: r.run,
        raw_excerpt: r.verdict.raw_excerpt.clone(),
    })
    .expect("record serializes")
}

pub fn write_records(records: &[PredictionRecord], path: &Path) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in records {
        writeln!(out, "{}", record_to_line(r)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let text = line.map_err(io_err)?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&text).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(PredictionRecord {
            sample_id: rec.sample_id,
            gold: rec.gold,
            verdict: Verdict {
                class: rec.verdict_class,
                matched_rule: rec.matched_rule,
                raw_excerpt: rec.raw_excerpt,
            },
            prompt_strategy_tag: rec.strategy_tag,
            backend_fingerprint: rec.backend_fingerprint,
            run: rec.run,
        });
    }
    Ok(out)
}
