//! Verbalizer: free-text model answer -> class.
//!
//! Rules are tried in order on the lowercased, whitespace-collapsed answer:
//!
//! 1. contains `non-vulnerable` or `not vulnerable` -> non-vulnerable
//! 2. contains `vulnerable` -> vulnerable
//! 3. otherwise -> unknown
//!
//! Rule 1 must run first because its phrases contain rule 2's.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;

pub const RULE_NON_VULNERABLE: &str = "non_vulnerable_phrase";
pub const RULE_VULNERABLE: &str = "vulnerable_phrase";
pub const RULE_NO_MATCH: &str = "no_match";
/// Not produced by [`verbalize`]; recorded when no answer could be obtained.
pub const RULE_TRANSPORT_ERROR: &str = "transport_error";

const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Class {
    Vulnerable,
    NonVulnerable,
    Unknown,
}

impl Class {
    pub fn as_str(self) -> &'static str {
        match self {
            Class::Vulnerable => "vulnerable",
            Class::NonVulnerable => "non-vulnerable",
            Class::Unknown => "unknown",
        }
    }

    pub fn label(self) -> Option<Label> {
        match self {
            Class::Vulnerable => Some(Label::Vulnerable),
            Class::NonVulnerable => Some(Label::NonVulnerable),
            Class::Unknown => None,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vulnerable" => Ok(Class::Vulnerable),
            "non-vulnerable" => Ok(Class::NonVulnerable),
            "unknown" => Ok(Class::Unknown),
            other => Err(format!("unknown verdict class {other:?}")),
        }
    }
}

impl From<Label> for Class {
    fn from(label: Label) -> Self {
        match label {
            Label::Vulnerable => Class::Vulnerable,
            Label::NonVulnerable => Class::NonVulnerable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub class: Class,
    pub matched_rule: String,
    /// First 200 characters of the raw answer.
    pub raw_excerpt: String,
}

impl Verdict {
    pub fn transport_error(message: &str) -> Self {
        Self {
            class: Class::Unknown,
            matched_rule: RULE_TRANSPORT_ERROR.into(),
            raw_excerpt: message.chars().take(EXCERPT_CHARS).collect(),
        }
    }
}

pub fn verbalize(answer: &str) -> Verdict {
    let normalized = answer
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let (class, rule) = if normalized.contains("non-vulnerable") || normalized.contains("not vulnerable") {
        (Class::NonVulnerable, RULE_NON_VULNERABLE)
    } else if normalized.contains("vulnerable") {
        (Class::Vulnerable, RULE_VULNERABLE)
    } else {
        (Class::Unknown, RULE_NO_MATCH)
    };
    Verdict {
        class,
        matched_rule: rule.into(),
        raw_excerpt: answer.chars().take(EXCERPT_CHARS).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_words() {
        assert_eq!(verbalize("this code is vulnerable").class, Class::Vulnerable);
        assert_eq!(verbalize("this code is non-vulnerable").class, Class::NonVulnerable);
    }

    #[test]
    fn free_text_answers() {
        let v = verbalize("It is vulnerable because the buffer length is unchecked.");
        assert_eq!(v.class, Class::Vulnerable);
        assert_eq!(v.matched_rule, RULE_VULNERABLE);
        assert_eq!(verbalize("I cannot analyze this.").class, Class::Unknown);
        assert_eq!(verbalize("").class, Class::Unknown);
        let v = verbalize("NOT VULNERABLE.");
        assert_eq!((v.class, v.matched_rule.as_str()), (Class::NonVulnerable, RULE_NON_VULNERABLE));
        assert_eq!(verbalize("this is not\n\t vulnerable").class, Class::NonVulnerable);
    }

    #[test]
    fn excerpt_is_bounded() {
        let long = "vulnerable ".repeat(100);
        assert_eq!(verbalize(&long).raw_excerpt.chars().count(), 200);
    }

    proptest! {
        #[test]
        fn non_vulnerable_never_reads_as_vulnerable(prefix in ".{0,40}", suffix in ".{0,40}") {
            let answer = format!("{prefix}non-vulnerable{suffix}");
            prop_assert_ne!(verbalize(&answer).class, Class::Vulnerable);
        }

        #[test]
        fn every_answer_gets_one_rule(answer in ".{0,120}") {
            let v = verbalize(&answer);
            prop_assert!([RULE_NON_VULNERABLE, RULE_VULNERABLE, RULE_NO_MATCH].contains(&v.matched_rule.as_str()));
        }
    }
}
