//! Pipeline commands behind the `vpl` binary.

pub mod commands;
pub mod config;

pub use commands::{build_dataset, compare, evaluate, index, make_backend, predict, Outcome, PredictSummary};
pub use config::{BackendKind, Settings};
