mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{EvaluateOptions, TrainOptions};
use crate::config::{MaskChoice, RunConfig};
use crate::error::CliError;
use crate::output::OutDir;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Attention-guided segmentation and causally masked explanations for
/// multivariate time series.
#[derive(Parser)]
#[command(name = "excap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth mask.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        /// Seed of the generator (independent of the model seeds).
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Fit the frozen reference attention model per seed.
    TrainReference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the model per seed and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        mask_source: Option<MaskChoice>,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
        /// Stop and checkpoint after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Export attributions and segment embeddings for the test split.
    Explain {
        #[command(flatten)]
        common: Common,
    },
    /// Masking faithfulness table, stability, Lipschitz and runtime tables.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Add random, gradient-saliency and integrated-gradients rows.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        k_percent: Option<f64>,
        /// Skip the runtime table.
        #[arg(long)]
        no_runtime: bool,
        /// Seeds evaluated in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Explanation sensitivity to Gaussian input noise.
    ProbeLipschitz {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Inference time against sequence length.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        iters: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainReference { .. } => "train-reference",
            Command::Train { .. } => "train",
            Command::Explain { .. } => "explain",
            Command::Evaluate { .. } => "evaluate",
            Command::ProbeLipschitz { .. } => "probe-lipschitz",
            Command::Profile { .. } => "profile",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainReference { common, .. }
            | Command::Train { common, .. }
            | Command::Explain { common }
            | Command::Evaluate { common, .. }
            | Command::ProbeLipschitz { common, .. }
            | Command::Profile { common, .. } => common,
        }
    }

    /// Flags win over the file.
    fn apply(&self, cfg: &mut RunConfig) {
        let c = self.common();
        if let Some(out) = &c.out {
            cfg.out = out.clone();
        }
        if let Some(seeds) = &c.seeds {
            cfg.seeds = seeds.clone();
        }
        match self {
            Command::GenData {
                train_size,
                test_size,
                data_seed,
                ..
            } => {
                set(&mut cfg.dataset.train_size, *train_size);
                set(&mut cfg.dataset.test_size, *test_size);
                set(&mut cfg.dataset.seed, *data_seed);
            }
            Command::TrainReference { epochs, .. } => set(&mut cfg.reference.epochs, *epochs),
            Command::Train {
                epochs, lr, mask_source, ..
            } => {
                set(&mut cfg.train.epochs, *epochs);
                set(&mut cfg.train.learning_rate, *lr);
                set(&mut cfg.mask.source, *mask_source);
            }
            Command::Evaluate { k_percent, .. } => set(&mut cfg.evaluation.k_percent, *k_percent),
            Command::ProbeLipschitz { sigmas, trials, .. } => {
                set(&mut cfg.evaluation.sigmas, sigmas.clone());
                set(&mut cfg.evaluation.lipschitz_trials, *trials);
            }
            Command::Profile { lengths, iters, .. } => {
                set(&mut cfg.evaluation.runtime_t, lengths.clone());
                set(&mut cfg.evaluation.runtime_iters, *iters);
            }
            Command::Explain { .. } => {}
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let cmd = cli.command;
    let mut cfg = RunConfig::load(&cmd.common().config)?;
    cmd.apply(&mut cfg);
    cfg.validate()?;
    let mut out = OutDir::create(&cfg.out, cmd.common().force)?;
    match &cmd {
        Command::GenData { .. } => commands::gen_data(&cfg, &mut out)?,
        Command::TrainReference { .. } => commands::train_reference_cmd(&cfg, &mut out)?,
        Command::Train {
            resume, stop_after, ..
        } => commands::train_cmd(
            &cfg,
            &TrainOptions {
                resume: *resume,
                stop_after: *stop_after,
            },
            &mut out,
        )?,
        Command::Explain { .. } => commands::explain_cmd(&cfg, &mut out)?,
        Command::Evaluate {
            baselines,
            no_runtime,
            jobs,
            ..
        } => commands::evaluate_cmd(
            &cfg,
            &EvaluateOptions {
                baselines: *baselines || cfg.evaluation.baselines,
                runtime: !*no_runtime,
                jobs: *jobs,
            },
            &mut out,
        )?,
        Command::ProbeLipschitz { .. } => commands::probe_lipschitz_cmd(&cfg, &mut out)?,
        Command::Profile { .. } => commands::profile_cmd(&cfg, &mut out)?,
    }
    out.finish(cmd.name(), &cfg.seeds)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
