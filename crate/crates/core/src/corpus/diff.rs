//! Minimal unified-diff reader.
//!
//! Only what labeling needs: for each file, the pre-image line numbers of
//! the removed (`-`) lines. Added lines have no pre-image position and are
//! not reported.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("line {line}: malformed hunk header {text:?}")]
    BadHunkHeader { line: usize, text: String },
    #[error("line {line}: hunk line outside of any file section")]
    OrphanHunk { line: usize },
    #[error("line {line}: hunk body longer than its header declares")]
    HunkOverrun { line: usize },
}

/// filename -> 1-based pre-image line numbers of removed lines
pub type ChangedLines = BTreeMap<String, BTreeSet<usize>>;

fn strip_path(raw: &str) -> Option<String> {
    let path = raw.split('\t').next().unwrap_or(raw).trim_end();
    if path == "/dev/null" {
        return None;
    }
    let path = path
        .strip_prefix("a/")
        .or_else(|| path.strip_prefix("b/"))
        .unwrap_or(path);
    Some(path.to_string())
}

/// `@@ -a[,b] +c[,d] @@` -> (a, b, d)
fn parse_hunk_header(text: &str) -> Option<(usize, usize, usize)> {
    let rest = text.strip_prefix("@@ -")?;
    let (ranges, _) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let range = |r: &str| -> Option<(usize, usize)> {
        match r.split_once(',') {
            Some((start, len)) => Some((start.parse().ok()?, len.parse().ok()?)),
            None => Some((r.parse().ok()?, 1)),
        }
    };
    let (old_start, old_len) = range(old)?;
    let (_, new_len) = range(new)?;
    Some((old_start, old_len, new_len))
}

/// Reads a (possibly multi-file) unified diff.
///
/// Files whose pre-image is `/dev/null` (newly created) are omitted. A file
/// present in the diff with only added lines maps to an empty set.
pub fn changed_pre_image_lines(diff: &str) -> Result<ChangedLines, DiffError> {
    let mut out = ChangedLines::new();
    let mut current: Option<String> = None;
    let mut in_file = false;
    // (next old line, old lines left, new lines left)
    let mut hunk: Option<(usize, usize, usize)> = None;

    for (idx, line) in diff.lines().enumerate() {
        let line_no = idx + 1;
        if let Some((old_line, old_left, new_left)) = hunk.as_mut() {
            if *old_left == 0 && *new_left == 0 {
                hunk = None;
            } else {
                let (first, _) = line.split_at(line.len().min(1));
                match first {
                    "-" => {
                        if *old_left == 0 {
                            return Err(DiffError::HunkOverrun { line: line_no });
                        }
                        if let Some(name) = &current {
                            out.entry(name.clone()).or_default().insert(*old_line);
                        }
                        *old_line += 1;
                        *old_left -= 1;
                    }
                    "+" => {
                        if *new_left == 0 {
                            return Err(DiffError::HunkOverrun { line: line_no });
                        }
                        *new_left -= 1;
                    }
                    " " | "" => {
                        if *old_left == 0 || *new_left == 0 {
                            return Err(DiffError::HunkOverrun { line: line_no });
                        }
                        *old_line += 1;
                        *old_left -= 1;
                        *new_left -= 1;
                    }
                    "\\" => {}
                    _ => return Err(DiffError::HunkOverrun { line: line_no }),
                }
                continue;
            }
        }

        if line.starts_with("\\") {
            continue;
        } else if let Some(rest) = line.strip_prefix("--- ") {
            current = strip_path(rest);
            in_file = true;
        } else if line.starts_with("+++ ") {
            if let Some(name) = &current {
                out.entry(name.clone()).or_default();
            }
        } else if line.starts_with("@@") {
            if !in_file {
                return Err(DiffError::OrphanHunk { line: line_no });
            }
            let (old_start, old_len, new_len) =
                parse_hunk_header(line).ok_or_else(|| DiffError::BadHunkHeader {
                    line: line_no,
                    text: line.to_string(),
                })?;
            hunk = Some((old_start, old_len, new_len));
        } else if line.starts_with("diff ") {
            current = None;
            in_file = false;
        }
    }
    Ok(out)
}
