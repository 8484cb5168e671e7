//! Run settings: built-in defaults, overridden by a `key=value` config
//! file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use vpl_core::eval::UnknownPolicy;
use vpl_core::llm::BackendConfig;
use vpl_core::promptkit::{DEFAULT_BUDGET, DEFAULT_COMPLETION_ALLOWANCE};
use vpl_core::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Live,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "live" => Ok(BackendKind::Live),
            other => Err(format!("unknown backend {other:?} (expected mock or live)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    /// Directory of commit directories, for build-dataset.
    pub commits: Option<PathBuf>,
    pub backend: BackendKind,
    pub llm: BackendConfig,
    pub mock_noise: f64,
    pub strategy: String,
    pub repeats: u32,
    pub split: Split,
    /// Predict on at most this many targets.
    pub limit: Option<usize>,
    pub budget: usize,
    pub completion_allowance: usize,
    pub unknown_policy: UnknownPolicy,
    /// CWE catalog file; the bundled one when unset.
    pub catalog: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            commits: None,
            backend: BackendKind::Mock,
            llm: BackendConfig::default(),
            mock_noise: 0.0,
            strategy: "P".into(),
            repeats: 1,
            split: Split::Test,
            limit: None,
            budget: DEFAULT_BUDGET,
            completion_allowance: DEFAULT_COMPLETION_ALLOWANCE,
            unknown_policy: UnknownPolicy::AsNegative,
            catalog: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("setting {key}: cannot parse {value:?}: {e}"))
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out",
        "commits",
        "backend",
        "base_url",
        "model",
        "temperature",
        "max_tokens",
        "max_retries",
        "timeout_secs",
        "parallelism",
        "mock_noise",
        "strategy",
        "repeats",
        "split",
        "limit",
        "budget",
        "completion_allowance",
        "unknown_policy",
        "catalog",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "commits" => self.commits = Some(PathBuf::from(value)),
            "backend" => self.backend = parse(key, value)?,
            "base_url" => self.llm.base_url = value.to_string(),
            "model" => self.llm.model_name = value.to_string(),
            "temperature" => self.llm.temperature = parse(key, value)?,
            "max_tokens" => self.llm.max_completion_tokens = parse(key, value)?,
            "max_retries" => self.llm.max_retries = parse(key, value)?,
            "timeout_secs" => self.llm.request_timeout = Duration::from_secs(parse(key, value)?),
            "parallelism" => self.llm.parallelism = parse(key, value)?,
            "mock_noise" => self.mock_noise = parse(key, value)?,
            "strategy" => self.strategy = value.to_string(),
            "repeats" => self.repeats = parse(key, value)?,
            "split" => self.split = parse(key, value)?,
            "limit" => self.limit = Some(parse(key, value)?),
            "budget" => self.budget = parse(key, value)?,
            "completion_allowance" => self.completion_allowance = parse(key, value)?,
            "unknown_policy" => self.unknown_policy = parse(key, value)?,
            "catalog" => self.catalog = Some(PathBuf::from(value)),
            other => bail!("unknown setting {other:?} (known: {})", Self::KEYS.join(", ")),
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (key, value) in parse_config(&text).with_context(|| format!("in config {}", path.display()))? {
                s.set(&key, &value).with_context(|| format!("in config {}", path.display()))?;
            }
        }
        for (key, value) in overrides {
            s.set(key, value)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.llm.validate().map_err(|e| anyhow!("{e}"))?;
        if !(0.0..=1.0).contains(&self.mock_noise) {
            bail!("mock_noise must be within [0, 1]");
        }
        if self.repeats == 0 {
            bail!("repeats must be at least 1");
        }
        if self.completion_allowance >= self.budget {
            bail!("completion_allowance must be smaller than budget");
        }
        Ok(())
    }
}

/// `key = value` lines; `#` starts a comment line. Later keys win.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", i + 1))?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# demo\nseed = 7\nstrategy=P+A1\nrepeats = 3\n").unwrap();
        let s = Settings::resolve(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.strategy, "P+A1");
        assert_eq!(s.repeats, 3);
        assert_eq!(s.budget, 4096);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(parse_config("no equals sign").is_err());
        let mut s = Settings::default();
        assert!(s.set("colour", "blue").is_err());
        assert!(s.set("repeats", "many").is_err());
        assert!(Settings::resolve(None, &[("temperature".into(), "3".into())]).is_err());
        assert!(Settings::resolve(None, &[("repeats".into(), "0".into())]).is_err());
    }
}
