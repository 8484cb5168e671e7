//! On-disk layout for one fixing commit:
//!
//! ```text
//! <dir>/meta.json   {"project": "...", "commit": "...", "split": "train"}
//! <dir>/fix.diff    unified diff of the fix
//! <dir>/pre/<path>  pre-commit contents of every file the diff touches
//! ```
//!
//! `split` is optional and defaults to train.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::diff::{changed_pre_image_lines, DiffError};
use super::{CommitInput, Split};

#[derive(Debug, Error)]
pub enum CommitDirError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Meta { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Diff {
        path: PathBuf,
        #[source]
        source: DiffError,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    project: String,
    commit: String,
    #[serde(default)]
    split: Option<Split>,
}

fn read(path: &Path) -> Result<String, CommitDirError> {
    fs::read_to_string(path).map_err(|source| CommitDirError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads one commit directory. Touched files absent from `pre/` are left
/// out, so ingestion reports them.
pub fn read_commit_dir(dir: &Path) -> Result<CommitInput, CommitDirError> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read(&meta_path)?).map_err(|e| CommitDirError::Meta {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    if meta.project.trim().is_empty() || meta.commit.trim().is_empty() {
        return Err(CommitDirError::Meta {
            path: meta_path,
            message: "project and commit must be non-empty".into(),
        });
    }
    let diff_path = dir.join("fix.diff");
    let changed_lines = changed_pre_image_lines(&read(&diff_path)?).map_err(|source| CommitDirError::Diff {
        path: diff_path,
        source,
    })?;
    let mut pre_image_files = BTreeMap::new();
    for filename in changed_lines.keys() {
        let path = dir.join("pre").join(filename);
        match fs::read_to_string(&path) {
            Ok(text) => {
                pre_image_files.insert(filename.clone(), text);
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(CommitDirError::Io { path, source }),
        }
    }
    Ok(CommitInput {
        project: meta.project,
        commit: meta.commit,
        split: meta.split,
        pre_image_files,
        changed_lines,
    })
}

/// Subdirectories of `root` holding a `meta.json`, sorted by name.
pub fn list_commit_dirs(root: &Path) -> Result<Vec<PathBuf>, CommitDirError> {
    let io_err = |source| CommitDirError::Io {
        path: root.to_path_buf(),
        source,
    };
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
