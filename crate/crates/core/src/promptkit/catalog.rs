use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::corpus::Label;

const BUNDLED: &str = include_str!("../../data/cwe_top25_2022.jsonl");

/// One catalog entry: a short snippet illustrating a CWE weakness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CweExample {
    pub cwe_id: String,
    pub title: String,
    pub code: String,
    pub label: Label,
}

fn valid_cwe_id(id: &str) -> bool {
    id.strip_prefix("CWE-")
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

/// Parses line-delimited catalog records, in file order.
pub fn parse_catalog(text: &str) -> Result<Vec<CweExample>, PromptError> {
    let mut out: Vec<CweExample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PromptError::Catalog { line: i + 1, message };
        let entry: CweExample = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if !valid_cwe_id(&entry.cwe_id) {
            return Err(bad(format!("cwe_id {:?} is not of the form CWE-<digits>", entry.cwe_id)));
        }
        if entry.code.trim().is_empty() {
            return Err(bad(format!("{} has empty code", entry.cwe_id)));
        }
        if out.iter().any(|e| e.cwe_id == entry.cwe_id) {
            return Err(bad(format!("{} listed twice", entry.cwe_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_catalog(path: &Path) -> Result<Vec<CweExample>, PromptError> {
    let text = fs::read_to_string(path).map_err(|e| PromptError::Catalog {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    parse_catalog(&text)
}

/// The 2022 CWE Top 25, one vulnerable C snippet each, in rank order.
pub fn bundled_catalog() -> Vec<CweExample> {
    parse_catalog(BUNDLED).expect("bundled catalog is well-formed")
}
