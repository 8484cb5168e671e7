use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use super::{CodeSample, Label, Split};

const FIELDS: [&str; 8] = [
    "id", "code", "label", "project", "filename", "commit", "language", "split",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {0:?} has empty code")]
    EmptyCode(String),
    #[error("split {split} is not balanced: {vulnerable} vulnerable vs {non_vulnerable} non-vulnerable")]
    Unbalanced {
        split: Split,
        vulnerable: usize,
        non_vulnerable: usize,
    },
    #[error("metadata file {path}: {message}")]
    Metadata { path: PathBuf, message: String },
}

/// An ordered collection of samples plus free-form metadata.
///
/// Metadata is persisted in a `<file>.meta.json` sidecar so the record file
/// itself only ever holds sample records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<CodeSample>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(samples: Vec<CodeSample>) -> Self {
        Self {
            samples,
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CodeSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// A new dataset holding only the samples of `split`, metadata copied.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            samples: self.split(split).cloned().collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&CodeSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// (vulnerable, non-vulnerable) counts for a split.
    pub fn class_counts(&self, split: Split) -> (usize, usize) {
        self.split(split).fold((0, 0), |(v, n), s| match s.label {
            Label::Vulnerable => (v + 1, n),
            Label::NonVulnerable => (v, n + 1),
        })
    }

    pub fn is_balanced_flagged(&self) -> bool {
        self.metadata.get("balanced").map(String::as_str) == Some("true")
    }

    /// Checks id uniqueness, non-empty code, and per-split balance when the
    /// `balanced=true` metadata flag is set.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateId(s.id.clone()));
            }
            if s.code.is_empty() {
                return Err(DatasetError::EmptyCode(s.id.clone()));
            }
        }
        if self.is_balanced_flagged() {
            for split in Split::ALL {
                let (vulnerable, non_vulnerable) = self.class_counts(split);
                if vulnerable != non_vulnerable {
                    return Err(DatasetError::Unbalanced {
                        split,
                        vulnerable,
                        non_vulnerable,
                    });
                }
            }
        }
        Ok(())
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn record_json(s: &CodeSample) -> String {
    let mut obj = Map::new();
    obj.insert("id".into(), Value::from(s.id.as_str()));
    obj.insert("code".into(), Value::from(s.code.as_str()));
    obj.insert("label".into(), Value::from(s.label.as_str()));
    obj.insert("project".into(), Value::from(s.project.as_str()));
    obj.insert("filename".into(), Value::from(s.filename.as_str()));
    obj.insert("commit".into(), Value::from(s.commit.as_str()));
    obj.insert("language".into(), Value::from(s.language.as_str()));
    obj.insert("split".into(), Value::from(s.split.as_str()));
    Value::Object(obj).to_string()
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for s in &ds.samples {
        writeln!(out, "{}", record_json(s)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;

    let meta_path = sidecar(path);
    if ds.metadata.is_empty() {
        if meta_path.exists() {
            fs::remove_file(&meta_path).map_err(io_err)?;
        }
    } else {
        let text = serde_json::to_string_pretty(&ds.metadata).expect("string map serializes");
        fs::write(&meta_path, text + "\n").map_err(|source| DatasetError::Io {
            path: meta_path.clone(),
            source,
        })?;
    }
    Ok(())
}

fn text_field(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String, DatasetError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(DatasetError::Malformed {
            line,
            field: field.into(),
            message: format!("expected a string, found {other}"),
        }),
        None => Err(DatasetError::Malformed {
            line,
            field: field.into(),
            message: "missing".into(),
        }),
    }
}

fn parse_record(text: &str, line: usize) -> Result<CodeSample, DatasetError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DatasetError::BadRecord {
        line,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(DatasetError::BadRecord {
            line,
            message: "record is not an object".into(),
        });
    };
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(DatasetError::Malformed {
            line,
            field: extra.clone(),
            message: "unexpected field".into(),
        });
    }
    let malformed = |field: &str, message: String| DatasetError::Malformed {
        line,
        field: field.into(),
        message,
    };
    let label = text_field(&obj, line, "label")?
        .parse::<Label>()
        .map_err(|m| malformed("label", m))?;
    let split = text_field(&obj, line, "split")?
        .parse::<Split>()
        .map_err(|m| malformed("split", m))?;
    let code = text_field(&obj, line, "code")?;
    if code.is_empty() {
        return Err(malformed("code", "empty".into()));
    }
    Ok(CodeSample {
        id: text_field(&obj, line, "id")?,
        code,
        label,
        project: text_field(&obj, line, "project")?,
        filename: text_field(&obj, line, "filename")?,
        commit: text_field(&obj, line, "commit")?,
        language: text_field(&obj, line, "language")?,
        split,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(io_err)?;
        if text.trim().is_empty() {
            continue;
        }
        let sample = parse_record(&text, line_no)?;
        if !seen.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId(sample.id));
        }
        samples.push(sample);
    }

    let meta_path = sidecar(path);
    let metadata = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
            path: meta_path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Metadata {
            path: meta_path.clone(),
            message: e.to_string(),
        })?
    } else {
        BTreeMap::new()
    };
    Ok(Dataset { samples, metadata })
}
