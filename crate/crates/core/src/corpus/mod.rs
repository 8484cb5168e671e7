//! Function-level vulnerability datasets mined from fixing commits.
//!
//! A commit touches some files; every function in the pre-commit version of
//! those files that overlaps a changed line is a positive sample, and each
//! positive is paired with one randomly chosen untouched function from the
//! same file.

mod commit_dir;
mod dataset;
pub mod diff;
mod extract;
mod ingest;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use commit_dir::{list_commit_dirs, read_commit_dir, CommitDirError};
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetError};
pub use extract::{extract_functions, Extraction, FunctionSpan};
pub use ingest::{
    ingest_commit, label_functions, language_for_path, sample_negatives, CommitInput, FileContext,
    IngestError, Ingested, LabeledSpan, Sampled,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Vulnerable,
    NonVulnerable,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Vulnerable => "vulnerable",
            Label::NonVulnerable => "non-vulnerable",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vulnerable" => Ok(Label::Vulnerable),
            "non-vulnerable" => Ok(Label::NonVulnerable),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    Cpp,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Cpp => "cpp",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One function with its label and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    /// `project/commit/filename:start_line`
    pub id: String,
    pub code: String,
    pub label: Label,
    pub project: String,
    pub filename: String,
    pub commit: String,
    pub language: String,
    pub split: Split,
}

impl CodeSample {
    pub fn make_id(project: &str, commit: &str, filename: &str, start_line: usize) -> String {
        format!("{project}/{commit}/{filename}:{start_line}")
    }
}
