//! Prompt-based vulnerability detection with chat-completion models.
//!
//! The pipeline runs in five stages, one module each:
//!
//! - [`corpus`]: mine function-level, class-balanced samples out of
//!   vulnerability-fixing commits.
//! - [`retrieval`]: embed code and find the most similar training samples.
//! - [`promptkit`]: render the task prompt plus its optional augmentation
//!   blocks under a token budget.
//! - [`llm`]: send prompts to a chat-completion backend (live, mock, cached).
//! - [`judge`] and [`eval`]: map free-text answers to labels and score them.

pub mod corpus;
pub mod diag;
pub mod eval;
pub mod judge;
pub mod llm;
pub mod promptkit;
pub mod retrieval;
pub mod seeded;

pub use corpus::{CodeSample, Dataset, Label, Split};
pub use diag::Diagnostic;
