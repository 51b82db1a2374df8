//! The `kern` command line: stats, synth, train, eval, freq and ablate.

pub mod commands;
pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kern_core::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "kern", version, about = "Knowledge-routed scene graph generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Category/predicate schema (JSON).
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Knowledge base file written by `stats`.
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Predcls,
    Sgcls,
    Both,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Count object co-occurrence and predicate priors into a knowledge base.
    Stats {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Generate synthetic train/val/test splits and the process behind them.
    Synth {
        /// Training images (overrides synth.images).
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
        #[arg(long)]
        test_images: Option<usize>,
    },
    /// Train both routers and keep the best checkpoint by validation mR@50.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a trained model, or an existing predictions file, with R@K and mR@K.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        /// Directory holding model.json and best.ckpt.
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Predictions (JSON lines) to score instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TaskArg::Both)]
        task: TaskArg,
        /// Also print the per-predicate recall table.
        #[arg(long)]
        per_predicate: bool,
    },
    /// Score the frequency baseline (PredCls, prior lookup only).
    Freq {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        per_predicate: bool,
    },
    /// Train the full model and both prior ablations with identical settings.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated seeds (overrides ablate.seeds and --seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Stats { .. } => "stats",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Freq { .. } => "freq",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::Format(_) => 2,
        Error::Validation(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

/// Applies flags on top of the config file (or defaults).
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(cli.common.config.as_deref())?;
    if let Some(t) = cli.common.threads {
        cfg.threads = t;
    }
    if let Some(seed) = cli.common.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.ablate.seeds = vec![seed];
    }
    match &cli.command {
        Command::Synth {
            images,
            val_images,
            test_images,
        } => {
            if let Some(n) = images {
                cfg.synth.images = *n;
            }
            if let Some(n) = val_images {
                cfg.splits.val_images = *n;
            }
            if let Some(n) = test_images {
                cfg.splits.test_images = *n;
            }
        }
        Command::Train {
            epochs, learning_rate, ..
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
        }
        Command::Ablate { seeds: Some(s), .. } => cfg.ablate.seeds = s.clone(),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// What a successful command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    /// Human-readable report printed on stdout.
    pub report: String,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    execute(&cli, args.iter().map(|a| a.to_string_lossy().into_owned()).collect())
}

pub fn execute(cli: &Cli, args: Vec<String>) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = resolve_config(cli)?;
    let out_dir = cli
        .common
        .out_dir
        .clone()
        .ok_or_else(|| Error::Validation("--out-dir is required".into()))?;
    std::fs::create_dir_all(&out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let mut inputs = BTreeMap::new();
    let produced = pool.install(|| commands::dispatch(cli, &cfg, &out_dir, &mut inputs))?;
    let seed = match cli.command {
        Command::Synth { .. } => cfg.synth.seed,
        Command::Ablate { .. } => cfg.ablate.seeds[0],
        _ => cfg.train.seed,
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args,
        config: cfg,
        seed,
        inputs,
        outputs: produced.outputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let manifest_path = manifest.write(&out_dir)?;
    Ok(Outcome {
        manifest,
        manifest_path,
        report: produced.report,
    })
}
