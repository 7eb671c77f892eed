//! `sepdrop`: train, evaluate, inspect, and gradient-check residual networks
//! with pyramidal widening and separated stochastic-depth gates.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 runtime failure (non-finite loss, I/O).

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{resolve, RunOptions};
use sepdrop_core::model::NetworkSpec;
use sepdrop_core::schedule::alpha_for_depth;
use std::path::PathBuf;
use std::process::ExitCode;

/// Errors mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// A verification suite reported a failure: exit 1.
    Verification(String),
    /// Training or I/O failed at runtime: exit 3.
    Runtime(String),
}

impl CliError {
    fn usage(e: impl ToString) -> Self {
        Self::Usage(e.to_string())
    }

    fn runtime(e: impl ToString) -> Self {
        Self::Runtime(e.to_string())
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Verification(_) => "verification",
            Self::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Verification(m) | Self::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Verification(_) => 1,
            Self::Usage(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "sepdrop", version, about = "Pyramidal residual networks with separated stochastic depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that needs a configuration; each one
/// overrides the corresponding config-file key.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key-value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// resnet | resdrop | pyramid | pyramid-drop | pyramid-sep-drop
    #[arg(long)]
    variant: Option<String>,
    /// Network depth (6n + 2)
    #[arg(long)]
    depth: Option<usize>,
    /// Total channel widening (default 5*(depth-2)/6 for pyramidal variants)
    #[arg(long)]
    alpha: Option<f64>,
    /// Survival probability of the deepest block
    #[arg(long = "p-last")]
    p_last: Option<f64>,
    /// Number of classes
    #[arg(long = "num-classes")]
    num_classes: Option<usize>,
    /// Model replicas K (batch size must divide by K)
    #[arg(long)]
    models: Option<usize>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate decay factor applied at each milestone
    #[arg(long = "lr-decay-factor")]
    lr_decay_factor: Option<f64>,
    /// Comma-separated milestone epochs (or "none")
    #[arg(long)]
    milestones: Option<String>,
    /// Weight decay
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// Nesterov momentum
    #[arg(long)]
    momentum: Option<f64>,
    /// Momentum dampening
    #[arg(long)]
    dampening: Option<f64>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// cifar10 | cifar100 | synthetic
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding CIFAR binary files
    #[arg(long = "data-dir")]
    data_dir: Option<PathBuf>,
    /// Output directory for metrics, checkpoints, resolved config
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Epochs between checkpoints (0 = final only)
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<usize>,
    /// Epochs between test evaluations (0 = never)
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
    /// Enable crop/flip augmentation of the training split
    #[arg(long)]
    augment: Option<bool>,
    /// grad-avg | param-avg
    #[arg(long = "sync-mode")]
    sync_mode: Option<String>,
    /// Steps between parameter averages (param-avg only)
    #[arg(long = "sync-every")]
    sync_every: Option<usize>,
    /// Synthetic training-set size
    #[arg(long = "train-count")]
    train_count: Option<usize>,
    /// Synthetic held-out-set size
    #[arg(long = "test-count")]
    test_count: Option<usize>,
    /// Synthetic blob contrast
    #[arg(long)]
    signal: Option<f64>,
    /// Synthetic pixel noise
    #[arg(long)]
    noise: Option<f64>,
}

impl ConfigArgs {
    fn to_options(&self) -> Result<RunOptions, CliError> {
        let mut flags = RunOptions {
            variant: self.variant.clone(),
            depth: self.depth,
            alpha: self.alpha,
            p_last: self.p_last,
            num_classes: self.num_classes,
            models: self.models,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            milestones: None,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            dampening: self.dampening,
            seed: self.seed,
            dataset: self.dataset.clone(),
            data_dir: self.data_dir.clone(),
            out_dir: self.out_dir.clone(),
            checkpoint_every: self.checkpoint_every,
            eval_every: self.eval_every,
            augment: self.augment,
            sync_mode: self.sync_mode.clone(),
            sync_every: self.sync_every,
            train_count: self.train_count,
            test_count: self.test_count,
            signal: self.signal,
            noise: self.noise,
        };
        if let Some(m) = &self.milestones {
            let parsed = RunOptions::from_text(&format!("milestones = {m}"))
                .map_err(CliError::usage)?;
            flags.milestones = parsed.milestones;
        }
        let base = match &self.config {
            Some(path) => RunOptions::from_file(path).map_err(CliError::usage)?,
            None => RunOptions::default(),
        };
        Ok(base.overridden_by(flags))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, checkpoints, and the resolved
    /// config into the output directory
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Resume from a checkpoint written by a previous run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured test split
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the channel/survival schedules and parameter count of a spec
    Inspect {
        #[command(flatten)]
        args: ConfigArgs,
        /// Emit CSV instead of the human-readable table
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference checks of every backward rule (desk-scale depths)
    Gradcheck {
        /// Network depth to check end to end (max 14)
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test fixture: corrupt the named component's analytic gradients
        /// and expect the harness to catch it
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { args, resume } => {
            let cfg = resolve(&args.to_options()?).map_err(CliError::usage)?;
            commands::run_train(&cfg, resume.as_deref())
        }
        Command::Eval { args, checkpoint } => {
            let cfg = resolve(&args.to_options()?).map_err(CliError::usage)?;
            commands::run_eval(&cfg, &checkpoint)
        }
        Command::Inspect { args, csv } => {
            let opts = args.to_options()?;
            let variant = commands::parse_variant(opts.variant.as_deref().unwrap_or("pyramid-sep-drop"))
                .map_err(CliError::Usage)?;
            let depth = opts.depth.unwrap_or(8);
            let alpha = match opts.alpha {
                Some(a) => a,
                None if variant.is_pyramidal() => alpha_for_depth(depth).map_err(CliError::usage)?,
                None => 0.0,
            };
            let spec = NetworkSpec::new(
                variant,
                depth,
                alpha,
                opts.p_last.unwrap_or(0.5),
                opts.num_classes.unwrap_or(10),
            );
            commands::run_inspect(&spec, csv)
        }
        Command::Gradcheck { depth, seed, corrupt } => {
            commands::run_gradcheck(depth, seed, corrupt.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error: {}",
                serde_json::json!({ "kind": e.kind(), "message": e.message() })
            );
            ExitCode::from(e.exit_code())
        }
    }
}
