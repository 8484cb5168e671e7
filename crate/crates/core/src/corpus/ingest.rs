use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use super::{extract_functions, CodeSample, FunctionSpan, Label, Language, Split};
use crate::diag::{Diagnostic, DiagnosticKind};
use crate::seeded;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSpan {
    pub span: FunctionSpan,
    pub label: Label,
}

/// A span is vulnerable iff at least one changed pre-image line falls inside it.
pub fn label_functions(spans: &[FunctionSpan], changed: &BTreeSet<usize>) -> Vec<LabeledSpan> {
    spans
        .iter()
        .map(|span| {
            let touched = changed.range(span.start_line..=span.end_line).next().is_some();
            LabeledSpan {
                span: span.clone(),
                label: if touched {
                    Label::Vulnerable
                } else {
                    Label::NonVulnerable
                },
            }
        })
        .collect()
}

/// Provenance shared by every sample drawn from one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileContext {
    pub project: String,
    pub commit: String,
    pub filename: String,
    pub language: Language,
    pub split: Split,
}

impl FileContext {
    fn sample(&self, span: &FunctionSpan, label: Label) -> CodeSample {
        CodeSample {
            id: CodeSample::make_id(&self.project, &self.commit, &self.filename, span.start_line),
            code: span.body.clone(),
            label,
            project: self.project.clone(),
            filename: self.filename.clone(),
            commit: self.commit.clone(),
            language: self.language.as_str().to_string(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sampled {
    pub samples: Vec<CodeSample>,
    /// Vulnerable functions left without a same-file negative partner.
    pub dropped: usize,
    pub diagnostics: Vec<Diagnostic>,
}

/// Pairs every vulnerable function with one distinct, uniformly drawn
/// non-vulnerable function of the same file.
///
/// The negatives are shuffled with the seeded generator and handed out to
/// the positives in span order; positives beyond the number of negatives are
/// dropped and counted. Output order is positive, its negative, next
/// positive, and so on.
pub fn sample_negatives(labeled: &[LabeledSpan], ctx: &FileContext, seed: u64) -> Sampled {
    let (positives, negatives): (Vec<&LabeledSpan>, Vec<&LabeledSpan>) =
        labeled.iter().partition(|l| l.label == Label::Vulnerable);
    let mut rng = seeded::rng(seed);
    let order = seeded::sample_indices(&mut rng, negatives.len(), negatives.len());

    let mut out = Sampled::default();
    for (pos, &neg_idx) in positives.iter().zip(&order) {
        out.samples.push(ctx.sample(&pos.span, Label::Vulnerable));
        out.samples
            .push(ctx.sample(&negatives[neg_idx].span, Label::NonVulnerable));
    }
    out.dropped = positives.len().saturating_sub(negatives.len());
    if out.dropped > 0 {
        out.diagnostics.push(Diagnostic::new(
            DiagnosticKind::DroppedPositive,
            format!(
                "{}: {} vulnerable function(s) had no unused non-vulnerable partner",
                ctx.filename, out.dropped
            ),
        ));
    }
    out
}

/// C/C++ by file extension; anything else is not ingested.
pub fn language_for_path(filename: &str) -> Option<Language> {
    let ext = Path::new(filename).extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "c" | "h" => Some(Language::C),
        "cc" | "cpp" | "cxx" | "hpp" | "hh" => Some(Language::Cpp),
        _ => None,
    }
}

/// Everything one vulnerability-fixing commit contributes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitInput {
    pub project: String,
    pub commit: String,
    pub split: Option<Split>,
    /// filename -> file contents before the commit
    pub pre_image_files: BTreeMap<String, String>,
    /// filename -> changed pre-image line numbers
    pub changed_lines: BTreeMap<String, BTreeSet<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ingested {
    pub samples: Vec<CodeSample>,
    pub dropped_positives: usize,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("commit {commit}: changed file {filename:?} has no pre-image")]
    MissingPreImage { commit: String, filename: String },
}

/// Extract, label and balance every touched C/C++ file of a commit.
///
/// Files are visited in name order and each gets its own generator derived
/// from `seed` and the filename, so the result does not depend on how the
/// caller ordered or parallelized commits.
pub fn ingest_commit(input: &CommitInput, seed: u64) -> Result<Ingested, IngestError> {
    let mut out = Ingested::default();
    for (filename, changed) in &input.changed_lines {
        let Some(source) = input.pre_image_files.get(filename) else {
            return Err(IngestError::MissingPreImage {
                commit: input.commit.clone(),
                filename: filename.clone(),
            });
        };
        let Some(language) = language_for_path(filename) else {
            out.diagnostics.push(Diagnostic::new(
                DiagnosticKind::SkippedFile,
                format!("{}: {filename} is not a C/C++ source file", input.commit),
            ));
            continue;
        };
        let extraction = extract_functions(source, language);
        out.diagnostics
            .extend(extraction.diagnostics.into_iter().map(|mut d| {
                d.message = format!("{filename}: {}", d.message);
                d
            }));
        let labeled = label_functions(&extraction.spans, changed);
        let ctx = FileContext {
            project: input.project.clone(),
            commit: input.commit.clone(),
            filename: filename.clone(),
            language,
            split: input.split.unwrap_or(Split::Train),
        };
        let sampled = sample_negatives(&labeled, &ctx, seeded::derive_seed(seed, filename));
        out.dropped_positives += sampled.dropped;
        out.samples.extend(sampled.samples);
        out.diagnostics.extend(sampled.diagnostics);
    }
    Ok(out)
}
