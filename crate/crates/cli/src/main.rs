//! `p2p`: synthetic data generation, training, tracking, evaluation,
//! ablation sweeps and diagnostics.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use p2p_core::model::Variant;

use crate::config::{Preset, RunConfig};

/// Bad arguments or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "p2p", version, about = "Part-to-part motion tracking on LiDAR point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file (see configs/ for the schema).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base configuration the file and overrides are applied to.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Config override, repeatable: `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>].
    #[arg(long, global = true, env = "P2P_OUT_DIR", value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true, env = "P2P_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackerKind {
    /// A trained network (needs --checkpoint).
    P2p,
    /// Constant-velocity Kalman filter on the box center.
    Cv,
    /// Ground-truth motion, for metric sanity checks.
    Oracle,
    /// Never moves the box.
    Zero,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic tracklets as a KITTI-layout directory.
    GenSynthetic {
        /// Number of tracklets.
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Train a motion network.
    Train {
        /// Training tracklets: a KITTI-layout directory or `synthetic:N[@SEED]`.
        #[arg(long, default_value = "synthetic:200")]
        data: String,
    },
    /// Track every tracklet from its first ground-truth box and write the boxes.
    Track {
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value = "p2p")]
        tracker: TrackerKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One-pass evaluation: Success and Precision overall and per sparsity bin.
    Eval {
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value = "p2p")]
        tracker: TrackerKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score boxes written by `track` instead of running a tracker.
        #[arg(long, value_name = "TRACKS_JSON")]
        pred: Option<PathBuf>,
    },
    /// Train and evaluate architecture variants over several seeds.
    Ablate {
        #[arg(long, default_value = "synthetic:200@1000")]
        train_data: String,
        #[arg(long, default_value = "synthetic:50@900000")]
        test_data: String,
        /// Seeds `seed, seed + 1, ...` per variant.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "p2p_point,ablate_merged,ablate_temporal,ablate_dual_concat"
        )]
        variants: Vec<Variant>,
    },
    /// Finite-difference check of the full forward pass and loss.
    Gradcheck {
        #[arg(long, default_value = "p2p_point")]
        variant: Variant,
        /// Use the configured model instead of the small test network.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Relative-error denominator floor.
        #[arg(long, default_value_t = 1e-3)]
        abs_floor: f64,
        #[arg(long, default_value_t = 100)]
        max_coords: usize,
    },
    /// Parameter count and multiply-adds of the configured model.
    Params {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Time the main kernels.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::Train { .. } => "train",
            Command::Track { .. } => "track",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Params { .. } => "params",
            Command::Bench { .. } => "bench",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Usage("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = RunConfig::load(c.config.as_deref(), c.preset, &c.set, c.seed)?;
    let name = cli.command.name();
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut run = commands::Run::start(name, cfg, out)?;
    match cli.command {
        Command::GenSynthetic { n } => commands::gen_synthetic(&mut run, n),
        Command::Train { data } => commands::train(&mut run, &data),
        Command::Track {
            data,
            tracker,
            checkpoint,
        } => commands::track(&mut run, &data, tracker, checkpoint.as_deref()),
        Command::Eval {
            data,
            tracker,
            checkpoint,
            pred,
        } => commands::eval(&mut run, &data, tracker, checkpoint.as_deref(), pred.as_deref()),
        Command::Ablate {
            train_data,
            test_data,
            seeds,
            variants,
        } => commands::ablate(&mut run, &train_data, &test_data, seeds, &variants),
        Command::Gradcheck {
            variant,
            full,
            tolerance,
            abs_floor,
            max_coords,
        } => commands::gradcheck(&mut run, variant, full, tolerance, abs_floor, max_coords),
        Command::Params { variant } => commands::params(&mut run, variant),
        Command::Bench { reps } => commands::bench(&mut run, reps),
    }?;
    run.finish()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
