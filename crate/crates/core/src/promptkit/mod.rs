//! Prompt construction: the base task prompt plus optional augmentation
//! blocks, fitted to a token budget.
//!
//! Blocks are joined with newlines in a fixed order: role description (A1),
//! project information (A2), CWE catalog examples (A3), random training
//! examples (A4), retrieved training examples (A5), then the base prompt with
//! the target code.

mod catalog;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeSample, Dataset, Label};
use crate::llm::ChatMessage;
use crate::retrieval::{top_k, Embedder, RetrievalError, RetrievalIndex};
use crate::seeded;

pub use catalog::{bundled_catalog, load_catalog, parse_catalog, CweExample};

pub const ROLE_PREAMBLE: &str = "You are an experienced developer who knows the security vulnerability very well";
pub const CWE_HEADER: &str = "Here are examples of the most dangerous CWE types.";
pub const RANDOM_HEADER: &str = "Here are sampled examples from the training data.";
pub const RETRIEVED_HEADER: &str = "Here are the most similar codes from the training data.";
pub const TRUNCATION_MARKER: &str = "...<truncated>";

pub const DEFAULT_BUDGET: usize = 4096;
/// Tokens held back from the budget for the model's answer.
pub const DEFAULT_COMPLETION_ALLOWANCE: usize = 256;
/// Upper bound on either few-shot K.
pub const MAX_K: usize = 16;

const BASE_TASK: &str = "Now you need to identify whether a method contains a vulnerability or not. \
If has any potential vulnerability, output: 'this code is vulnerable'. \
Otherwise, output: 'this code is non-vulnerable'.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("target code is empty")]
    EmptyTarget,
    #[error("project information needs a project and a filename; disable A2 for samples without them")]
    MissingProjectInfo,
    #[error("K={0} is above the limit of {MAX_K}")]
    KOutOfRange(usize),
    #[error("asked for {requested} examples but only {available} are available")]
    NotEnoughExamples { requested: usize, available: usize },
    #[error("retrieved examples requested but no index was supplied")]
    MissingIndex,
    #[error("CWE examples requested but the catalog is empty")]
    EmptyCatalog,
    #[error("index entry {0:?} has no matching training sample")]
    UnknownIndexEntry(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("prompt for {target_id} cannot fit {limit} tokens: the base prompt alone needs {needed}")]
    Unsatisfiable {
        target_id: String,
        needed: usize,
        limit: usize,
    },
    #[error("bad strategy tag {tag:?}: {reason}")]
    BadTag { tag: String, reason: String },
    #[error("catalog line {line}: {message}")]
    Catalog { line: usize, message: String },
}

/// Which augmentations to apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub use_role: bool,
    pub use_project_info: bool,
    pub use_cwe_examples: bool,
    pub random_k: usize,
    pub retrieved_k: usize,
    pub seed: u64,
}

impl PromptStrategy {
    /// The bare base prompt.
    pub fn base(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for k in [self.random_k, self.retrieved_k] {
            if k > MAX_K {
                return Err(PromptError::KOutOfRange(k));
            }
        }
        Ok(())
    }

    /// Canonical tag such as `P+A1+A4(3)+A5(3)`. The seed is not part of it.
    pub fn tag(&self) -> String {
        let mut tag = String::from("P");
        if self.use_role {
            tag.push_str("+A1");
        }
        if self.use_project_info {
            tag.push_str("+A2");
        }
        if self.use_cwe_examples {
            tag.push_str("+A3");
        }
        if self.random_k > 0 {
            tag.push_str(&format!("+A4({})", self.random_k));
        }
        if self.retrieved_k > 0 {
            tag.push_str(&format!("+A5({})", self.retrieved_k));
        }
        tag
    }

    /// Inverse of [`tag`](Self::tag). Parts may come in any order but not twice.
    pub fn parse_tag(tag: &str, seed: u64) -> Result<Self, PromptError> {
        let bad = |reason: &str| PromptError::BadTag {
            tag: tag.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = tag.trim().split('+');
        if parts.next() != Some("P") {
            return Err(bad("must start with P"));
        }
        let mut s = Self::base(seed);
        let mut seen = Vec::new();
        for part in parts {
            let (name, k) = match part.split_once('(') {
                Some((name, rest)) => {
                    let digits = rest.strip_suffix(')').ok_or_else(|| bad("unclosed parenthesis"))?;
                    let k: usize = digits.parse().map_err(|_| bad("K is not a number"))?;
                    if k == 0 || k > MAX_K {
                        return Err(bad("K must be between 1 and 16"));
                    }
                    (name, Some(k))
                }
                None => (part, None),
            };
            if seen.contains(&name) {
                return Err(bad("augmentation listed twice"));
            }
            seen.push(name);
            match (name, k) {
                ("A1", None) => s.use_role = true,
                ("A2", None) => s.use_project_info = true,
                ("A3", None) => s.use_cwe_examples = true,
                ("A4", Some(k)) => s.random_k = k,
                ("A5", Some(k)) => s.retrieved_k = k,
                ("A4" | "A5", None) => return Err(bad("A4 and A5 need a K, e.g. A4(3)")),
                ("A1" | "A2" | "A3", Some(_)) => return Err(bad("only A4 and A5 take a K")),
                _ => return Err(bad("unknown augmentation")),
            }
        }
        Ok(s)
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    CweCatalog,
    RandomTrain,
    RetrievedTrain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub code: String,
    pub label: Label,
    pub origin: Origin,
    /// Sample id, or the CWE id for catalog entries.
    pub source_id: String,
}

impl FewShotExample {
    fn from_sample(sample: &CodeSample, origin: Origin) -> Self {
        Self {
            code: sample.code.clone(),
            label: sample.label,
            origin,
            source_id: sample.id.clone(),
        }
    }

    pub fn from_cwe(entry: &CweExample) -> Self {
        Self {
            code: entry.code.clone(),
            label: entry.label,
            origin: Origin::CweCatalog,
            source_id: entry.cwe_id.clone(),
        }
    }
}

/// The base prompt. The code is inserted as-is in a single pass.
pub fn render_base(target_code: &str) -> String {
    format!("{BASE_TASK}\nThe code is {target_code}. Let's start:")
}

pub fn render_role_preamble() -> &'static str {
    ROLE_PREAMBLE
}

pub fn render_project_info(project: &str, filename: &str) -> Result<String, PromptError> {
    if project.trim().is_empty() || filename.trim().is_empty() {
        return Err(PromptError::MissingProjectInfo);
    }
    Ok(format!("The code is from {project}. The filename is {filename}."))
}

/// `header`, then `Example<i>: <code>` / `Label<i>: this code is <label>.`
/// for each example, numbered from 1.
pub fn render_examples(header: &str, examples: &[FewShotExample]) -> String {
    let mut out = String::from(header);
    for (i, ex) in examples.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!("\nExample{n}: {}\nLabel{n}: this code is {}.", ex.code, ex.label));
    }
    out
}

fn draw_random(pool: &[&CodeSample], k: usize, seed: u64) -> Result<Vec<FewShotExample>, PromptError> {
    if k > pool.len() {
        return Err(PromptError::NotEnoughExamples {
            requested: k,
            available: pool.len(),
        });
    }
    let mut rng = seeded::rng(seed);
    Ok(seeded::sample_indices(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| FewShotExample::from_sample(pool[i], Origin::RandomTrain))
        .collect())
}

/// `k` distinct training samples drawn uniformly without replacement, in
/// draw order, regardless of label.
pub fn select_random_examples(train: &Dataset, k: usize, seed: u64) -> Result<Vec<FewShotExample>, PromptError> {
    let pool: Vec<&CodeSample> = train.samples.iter().collect();
    draw_random(&pool, k, seed)
}

fn retrieve(
    index: &RetrievalIndex,
    train: &Dataset,
    query_code: &str,
    k: usize,
    embedder: &dyn Embedder,
    exclude: impl Fn(&CodeSample) -> bool,
) -> Result<Vec<FewShotExample>, PromptError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    index.check_fingerprint(embedder)?;
    let by_id: HashMap<&str, &CodeSample> = train.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let excluded = train.samples.iter().filter(|s| exclude(s)).count();
    let query = embedder.embed(query_code)?;
    let mut out = Vec::with_capacity(k);
    for hit in top_k(index, &query, k + excluded)? {
        let sample = by_id
            .get(hit.id.as_str())
            .ok_or_else(|| PromptError::UnknownIndexEntry(hit.id.clone()))?;
        if exclude(sample) {
            continue;
        }
        out.push(FewShotExample::from_sample(sample, Origin::RetrievedTrain));
        if out.len() == k {
            return Ok(out);
        }
    }
    Err(PromptError::NotEnoughExamples {
        requested: k,
        available: out.len(),
    })
}

/// The `k` training samples most similar to `query_code`, most similar first.
pub fn select_retrieved_examples(
    index: &RetrievalIndex,
    train: &Dataset,
    query_code: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<FewShotExample>, PromptError> {
    retrieve(index, train, query_code, k, embedder, |_| false)
}

pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// One token per four characters, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharHeuristic;

impl TokenEstimator for CharHeuristic {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    CharHeuristic.estimate(text)
}

/// Order of the retrieved block. Dropping under budget pressure always
/// removes the least similar example first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RetrievedOrder {
    #[default]
    MostSimilarFirst,
    MostSimilarLast,
}

#[derive(Clone)]
pub struct ComposeOptions {
    pub budget: usize,
    pub completion_allowance: usize,
    pub system_text: String,
    pub retrieved_order: RetrievedOrder,
    pub estimator: Arc<dyn TokenEstimator>,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            completion_allowance: DEFAULT_COMPLETION_ALLOWANCE,
            system_text: String::new(),
            retrieved_order: RetrievedOrder::MostSimilarFirst,
            estimator: Arc::new(CharHeuristic),
        }
    }
}

impl fmt::Debug for ComposeOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComposeOptions")
            .field("budget", &self.budget)
            .field("completion_allowance", &self.completion_allowance)
            .field("system_text", &self.system_text)
            .field("retrieved_order", &self.retrieved_order)
            .finish_non_exhaustive()
    }
}

impl ComposeOptions {
    /// Tokens available to the prompt itself.
    pub fn prompt_limit(&self) -> usize {
        self.budget.saturating_sub(self.completion_allowance)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Parts {
    role: bool,
    project_info: Option<String>,
    cwe: Vec<FewShotExample>,
    random: Vec<FewShotExample>,
    /// Most similar first, whatever the rendered order.
    retrieved: Vec<FewShotExample>,
    retrieved_order: RetrievedOrder,
    target_code: String,
}

impl Parts {
    fn rendered_retrieved(&self) -> Vec<FewShotExample> {
        let mut r = self.retrieved.clone();
        if self.retrieved_order == RetrievedOrder::MostSimilarLast {
            r.reverse();
        }
        r
    }

    fn render(&self) -> String {
        let mut blocks: Vec<String> = Vec::new();
        if self.role {
            blocks.push(ROLE_PREAMBLE.to_string());
        }
        if let Some(info) = &self.project_info {
            blocks.push(info.clone());
        }
        for (header, examples) in [
            (CWE_HEADER, self.cwe.clone()),
            (RANDOM_HEADER, self.random.clone()),
            (RETRIEVED_HEADER, self.rendered_retrieved()),
        ] {
            if !examples.is_empty() {
                blocks.push(render_examples(header, &examples));
            }
        }
        blocks.push(render_base(&self.target_code));
        blocks.join("\n")
    }

    fn example_ids(&self) -> Vec<String> {
        self.cwe
            .iter()
            .chain(&self.random)
            .chain(&self.rendered_retrieved())
            .map(|e| e.source_id.clone())
            .collect()
    }
}

/// A rendered prompt plus the pieces it was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedPrompt {
    pub system_text: String,
    pub user_text: String,
    pub strategy_tag: String,
    /// In rendered order.
    pub included_example_ids: Vec<String>,
    pub token_estimate: usize,
    pub target_sample_id: String,
    pub target_truncated: bool,
    parts: Parts,
}

impl ComposedPrompt {
    fn rebuild(&mut self, estimator: &dyn TokenEstimator) {
        self.user_text = self.parts.render();
        self.included_example_ids = self.parts.example_ids();
        self.token_estimate = estimator.estimate(&self.system_text) + estimator.estimate(&self.user_text);
    }

    pub fn example_count(&self) -> usize {
        self.included_example_ids.len()
    }

    /// `[system, user]`, as sent to a chat backend.
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(self.system_text.clone()), ChatMessage::user(self.user_text.clone())]
    }
}

/// Where A5 examples come from.
#[derive(Clone, Copy)]
pub struct RetrievalSource<'a> {
    pub index: &'a RetrievalIndex,
    pub embedder: &'a dyn Embedder,
}

/// Builds the full prompt for `target` without applying the budget.
///
/// Random examples use a generator seeded from `(strategy.seed, target.id)`,
/// so a prompt does not depend on which other targets were composed. The
/// target itself (same id or same code) is never offered as an example.
pub fn assemble(
    strategy: &PromptStrategy,
    target: &CodeSample,
    train: &Dataset,
    retrieval: Option<RetrievalSource<'_>>,
    cwe_catalog: &[CweExample],
    opts: &ComposeOptions,
) -> Result<ComposedPrompt, PromptError> {
    strategy.validate()?;
    if target.code.trim().is_empty() {
        return Err(PromptError::EmptyTarget);
    }
    let is_target = |s: &CodeSample| s.id == target.id || s.code == target.code;

    let project_info = if strategy.use_project_info {
        Some(render_project_info(&target.project, &target.filename)?)
    } else {
        None
    };
    let cwe = if strategy.use_cwe_examples {
        if cwe_catalog.is_empty() {
            return Err(PromptError::EmptyCatalog);
        }
        cwe_catalog.iter().map(FewShotExample::from_cwe).collect()
    } else {
        Vec::new()
    };
    let random = if strategy.random_k > 0 {
        let pool: Vec<&CodeSample> = train.samples.iter().filter(|s| !is_target(s)).collect();
        draw_random(&pool, strategy.random_k, seeded::derive_seed(strategy.seed, &target.id))?
    } else {
        Vec::new()
    };
    let retrieved = if strategy.retrieved_k > 0 {
        let src = retrieval.ok_or(PromptError::MissingIndex)?;
        retrieve(src.index, train, &target.code, strategy.retrieved_k, src.embedder, is_target)?
    } else {
        Vec::new()
    };

    let mut prompt = ComposedPrompt {
        system_text: opts.system_text.clone(),
        user_text: String::new(),
        strategy_tag: strategy.tag(),
        included_example_ids: Vec::new(),
        token_estimate: 0,
        target_sample_id: target.id.clone(),
        target_truncated: false,
        parts: Parts {
            role: strategy.use_role,
            project_info,
            cwe,
            random,
            retrieved,
            retrieved_order: opts.retrieved_order,
            target_code: target.code.clone(),
        },
    };
    prompt.rebuild(&*opts.estimator);
    Ok(prompt)
}

/// [`assemble`] followed by [`fit_budget`] against the options' prompt limit.
pub fn compose(
    strategy: &PromptStrategy,
    target: &CodeSample,
    train: &Dataset,
    retrieval: Option<RetrievalSource<'_>>,
    cwe_catalog: &[CweExample],
    opts: &ComposeOptions,
) -> Result<ComposedPrompt, PromptError> {
    let prompt = assemble(strategy, target, train, retrieval, cwe_catalog, opts)?;
    fit_budget(prompt, opts.prompt_limit(), &*opts.estimator)
}

/// Shrinks `prompt` until its estimate is at most `limit` tokens.
///
/// Whole examples go first: random ones from the last, then retrieved ones
/// from the least similar, then catalog ones from the last. If that is not
/// enough the tail of the target code is cut and [`TRUNCATION_MARKER`]
/// appended. The base task text is never touched.
pub fn fit_budget(
    mut prompt: ComposedPrompt,
    limit: usize,
    estimator: &dyn TokenEstimator,
) -> Result<ComposedPrompt, PromptError> {
    if limit == 0 {
        return Err(PromptError::ZeroBudget);
    }
    prompt.rebuild(estimator);
    if prompt.token_estimate <= limit {
        return Ok(prompt);
    }
    // fewest drops that fit, by bisection; estimates shrink as examples go
    let droppable = prompt.parts.random.len() + prompt.parts.retrieved.len() + prompt.parts.cwe.len();
    let with_drops = |n: usize| {
        let mut q = prompt.clone();
        let parts = &mut q.parts;
        for _ in 0..n {
            let _ = parts.random.pop().or_else(|| parts.retrieved.pop()).or_else(|| parts.cwe.pop());
        }
        q.rebuild(estimator);
        q
    };
    let stripped = with_drops(droppable);
    if stripped.token_estimate <= limit {
        let (mut lo, mut hi) = (0, droppable);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if with_drops(mid).token_estimate <= limit {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        return Ok(with_drops(hi));
    }
    let prompt = stripped;

    let chars: Vec<char> = prompt.parts.target_code.chars().collect();
    let with_prefix = |p: &ComposedPrompt, n: usize| {
        let mut q = p.clone();
        q.parts.target_code = chars[..n].iter().collect::<String>() + TRUNCATION_MARKER;
        q.target_truncated = true;
        q.rebuild(estimator);
        q
    };
    let shortest = with_prefix(&prompt, 0);
    if shortest.token_estimate > limit {
        return Err(PromptError::Unsatisfiable {
            target_id: prompt.target_sample_id,
            needed: shortest.token_estimate,
            limit,
        });
    }
    // largest prefix that fits; estimates grow with the prefix length
    let (mut lo, mut hi) = (0, chars.len());
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if with_prefix(&prompt, mid).token_estimate <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(with_prefix(&prompt, lo))
}
