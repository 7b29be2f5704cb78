//! `taskdistill`: distill cart-pole into synthetic datasets, evaluate them,
//! and run the reference baselines.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or input error,
//! 3 numerical failure, 4 distillation did not beat the random baseline.

mod artifacts;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;
use taskdistill::eval::Variant;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("distillation did not beat the random baseline (best window reward {best:.2}, random {random:.2})")]
    DidNotLearn { best: f64, random: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::DidNotLearn { .. } => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "taskdistill", version, about = "Cart-pole task distillation experiments")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of cart-pole dimensions.
    #[arg(long)]
    dims: Option<usize>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    /// Synthetic instances.
    #[arg(long)]
    k: Option<usize>,
    /// Meta-epoch budget.
    #[arg(long)]
    meta_epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Distill the environment into a synthetic dataset.
    Distill(DistillArgs),
    /// Distill with the reference network split into an encoder and a learner.
    EncoderRollback {
        #[command(flatten)]
        args: DistillArgs,
        /// Layer at which the reference network is split (0..=3).
        #[arg(long)]
        split_layer: usize,
    },
    /// k-shot evaluation of a dataset file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// lambda, ortho-sigma1, xe, xe-sigma1, random-h or random-l.
        #[arg(long)]
        distribution: Option<String>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a policy directly with PPO.
    RlBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rewards of uniformly random actions.
    RandomBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Distill and evaluate for each k.
    KminSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        k_values: Option<Vec<usize>>,
        #[arg(long)]
        meta_epochs: Option<usize>,
    },
    /// Tabular view of the synthetic instances.
    ExportView {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Cost accounting over finished runs.
    CostReport {
        /// Manifest files written by earlier runs.
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli, common: Option<&Common>) -> Result<RunConfig, CliError> {
    let mut cfg = match common.and_then(|c| c.config.as_deref()) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(n) = common.and_then(|c| c.dims) {
        cfg.env.n_dims = n;
    }
    Ok(cfg)
}

fn apply_distill_args(cfg: &mut RunConfig, a: &DistillArgs) {
    if let Some(k) = a.k {
        cfg.distill.k = k;
    }
    if let Some(m) = a.meta_epochs {
        cfg.distill.meta_epochs = m;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Distill(a) => {
            let mut cfg = resolve(&cli, Some(&a.common))?;
            apply_distill_args(&mut cfg, a);
            commands::distill(&cfg, "distill")
        }
        Command::EncoderRollback { args, split_layer } => {
            let mut cfg = resolve(&cli, Some(&args.common))?;
            apply_distill_args(&mut cfg, args);
            cfg.distill.split_layer = Some(*split_layer);
            commands::distill(&cfg, "encoder-rollback")
        }
        Command::Eval {
            common,
            dataset,
            distribution,
            agents,
            episodes,
        } => {
            let mut cfg = resolve(&cli, Some(common))?;
            if let Some(d) = distribution {
                cfg.eval.distribution = d.parse::<Variant>().map_err(|e| CliError::Config(e.to_string()))?;
            }
            if let Some(n) = agents {
                cfg.eval.n_agents = *n;
            }
            if let Some(n) = episodes {
                cfg.eval.n_episodes = *n;
            }
            commands::eval(&cfg, dataset)
        }
        Command::RlBaseline { common, epochs } => {
            let mut cfg = resolve(&cli, Some(common))?;
            if let Some(e) = epochs {
                cfg.baseline.epochs = *e;
            }
            commands::rl_baseline(&cfg)
        }
        Command::RandomBaseline { common, episodes } => {
            let mut cfg = resolve(&cli, Some(common))?;
            if let Some(e) = episodes {
                cfg.eval.random_episodes = *e;
            }
            commands::random_baseline(&cfg)
        }
        Command::KminSweep {
            common,
            k_values,
            meta_epochs,
        } => {
            let mut cfg = resolve(&cli, Some(common))?;
            if let Some(k) = k_values {
                cfg.sweep.k_values = k.clone();
            }
            if let Some(m) = meta_epochs {
                cfg.distill.meta_epochs = *m;
            }
            commands::kmin_sweep(&cfg)
        }
        Command::ExportView { dataset } => {
            let cfg = resolve(&cli, None)?;
            commands::export_view(&cfg, dataset)
        }
        Command::CostReport { manifests } => {
            let cfg = resolve(&cli, None)?;
            commands::cost_report(&cfg, manifests)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
