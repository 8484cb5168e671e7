use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpl_cli::{build_dataset, compare, evaluate, index, make_backend, predict, Outcome, Settings};

/// Vulnerability detection with prompted chat models.
#[derive(Parser)]
#[command(name = "vpl", version)]
struct Cli {
    /// key=value settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra setting, repeatable: --set key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a balanced function-level dataset from commit directories
    BuildDataset {
        #[arg(long)]
        commits: Option<PathBuf>,
    },
    /// Fit the lexical embedder and index the training split
    Index,
    /// Query the backend for every target and record verdicts
    Predict {
        /// Strategy tag, e.g. P+A4(3)+A5(3)
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        repeats: Option<u32>,
        /// mock or live
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score prediction files and write reports
    Evaluate {
        /// as-negative, as-positive or drop
        #[arg(long)]
        unknown_policy: Option<String>,
    },
    /// Combine all reports into one table
    Compare,
}

fn overrides(cli: &Cli) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {kv:?}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    push("out", cli.out.as_ref().map(|p| p.display().to_string()));
    match &cli.command {
        Command::BuildDataset { commits } => push("commits", commits.as_ref().map(|p| p.display().to_string())),
        Command::Predict {
            strategy,
            repeats,
            backend,
            split,
            limit,
        } => {
            push("strategy", strategy.clone());
            push("repeats", repeats.map(|r| r.to_string()));
            push("backend", backend.clone());
            push("split", split.clone());
            push("limit", limit.map(|l| l.to_string()));
        }
        Command::Evaluate { unknown_policy } => push("unknown_policy", unknown_policy.clone()),
        Command::Index | Command::Compare => {}
    }
    Ok(out)
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let settings = Settings::resolve(cli.config.as_deref(), &overrides(cli)?)?;
    match cli.command {
        Command::BuildDataset { .. } => build_dataset(&settings),
        Command::Index => index(&settings),
        Command::Predict { .. } => {
            let (backend, cfg) = make_backend(&settings)?;
            Ok(predict(&settings, backend.as_ref(), &cfg)?.outcome)
        }
        Command::Evaluate { .. } => evaluate(&settings),
        Command::Compare => compare(&settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            if outcome.warnings.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("finished with {} warning(s)", outcome.warnings.len());
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
