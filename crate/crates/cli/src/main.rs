//! `scanreg`: projection, training, registration, evaluation, ablations and
//! benchmarks for the LiDAR registration network.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
//! or failed self-check.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use config::{Precision, RunConfig};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

#[derive(Debug, thiserror::Error)]
#[error("check failed: {0}")]
pub struct CheckFailed(String);

#[derive(Parser, Debug)]
#[command(
    name = "scanreg",
    version,
    about = "LiDAR scan registration with projection-aware transformers"
)]
struct Cli {
    /// TOML run configuration (see `scanreg init-config`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (file for `init-config`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the number of training steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Worker threads for per-pair parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the annotated default configuration.
    InitConfig {
        #[arg(long)]
        force: bool,
    },
    /// Project a KITTI .bin scan and verify the round trip.
    Project { input: PathBuf },
    /// Train on synthetic pairs until the targets are met; writes a checkpoint.
    Overfit,
    /// Register a source scan onto a target scan.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        source: PathBuf,
        target: PathBuf,
    },
    /// Evaluate a checkpoint on a pair list.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `pair_id source.bin target.bin` + 12 ground-truth values per line.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        rre_thresh: Option<f64>,
        #[arg(long)]
        rte_thresh: Option<f64>,
    },
    /// Write synthetic scan pairs and a pair list.
    Synth {
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Use the source scan as the target (identity ground truth).
        #[arg(long)]
        identical: bool,
    },
    /// Train and evaluate each model variant with the same data and seed.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = commands::VARIANTS.map(String::from))]
        variants: Vec<String>,
    },
    /// Time encoder and full forward passes across grid widths.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Fail (exit 3) if encoder time grows faster than linearly.
        #[arg(long)]
        check: bool,
    },
}

fn base_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.steps {
        cfg.overfit.steps = n;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match &cli.command {
        Command::InitConfig { force } => {
            let path = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("scanreg.toml"));
            if path.exists() && !force {
                bail!(UsageError(format!(
                    "{} exists; pass --force to overwrite",
                    path.display()
                )));
            }
            std::fs::write(&path, config::TEMPLATE)?;
            println!("wrote {}", path.display());
        }
        Command::Project { input } => {
            let cfg = base_config(&cli, None)?;
            commands::project(&cfg, input, &cfg.paths.out)?;
        }
        Command::Overfit => {
            let cfg = base_config(&cli, None)?;
            commands::overfit(&cfg, &cfg.paths.out)?;
        }
        Command::Register {
            checkpoint,
            source,
            target,
        } => {
            let (cfg_path, ckpt) = commands::checkpoint_paths(checkpoint)?;
            let cfg = base_config(&cli, Some(&cfg_path))?;
            commands::register(&cfg, &ckpt, source, target)?;
        }
        Command::Eval {
            checkpoint,
            pairs,
            rre_thresh,
            rte_thresh,
        } => {
            let (cfg_path, ckpt) = commands::checkpoint_paths(checkpoint)?;
            let mut cfg = base_config(&cli, Some(&cfg_path))?;
            if cli.out.is_none() {
                cfg.paths.out = checkpoint_dir(&ckpt).join("eval");
            }
            if let Some(a) = rre_thresh {
                cfg.eval.rre_thresh_deg = *a;
            }
            if let Some(b) = rte_thresh {
                cfg.eval.rte_thresh_m = *b;
            }
            let list = match (pairs, &cfg.paths.pairs) {
                (Some(p), _) | (None, Some(p)) => p.clone(),
                (None, None) => bail!(UsageError(
                    "eval needs --pairs or paths.pairs in the config".into()
                )),
            };
            commands::eval(&cfg, &ckpt, &list, &cfg.paths.out)?;
        }
        Command::Synth { count, identical } => {
            let cfg = base_config(&cli, None)?;
            commands::synth(&cfg, &cfg.paths.out, *count, *identical)?;
        }
        Command::Ablate { variants } => {
            let cfg = base_config(&cli, None)?;
            commands::ablate(&cfg, variants, &cfg.paths.out)?;
        }
        Command::Bench {
            sizes,
            height,
            reps,
            check,
        } => {
            let cfg = base_config(&cli, None)?;
            commands::bench(&cfg, *height, sizes, *reps, *check, &cfg.paths.out)?;
        }
    }
    Ok(())
}

fn checkpoint_dir(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<CheckFailed>() {
            return 3;
        }
        if let Some(err) = cause.downcast_ref::<scanreg::Error>() {
            return if err.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
