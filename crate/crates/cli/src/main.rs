mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "agbnet",
    version,
    about = "Biomass mapping from multi-sensor rasters and lidar footprints"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration for the subcommand; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Computation is single-threaded; values above 1 are
    /// recorded but do not change results.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "agbnet_out")]
    pub out: PathBuf,
    /// Also write PNG figures.
    #[arg(long, global = true)]
    pub plot: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with known biomass.
    Synth,
    /// Derive the feature stack and label plane from sensor rasters.
    Preprocess {
        /// Directory holding the sensor rasters and footprints.csv.
        #[arg(long)]
        input: PathBuf,
    },
    /// Cut the stack and labels into training patches.
    Patchify {
        /// Directory holding stack.btr and labels.btr.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
    },
    /// Hold out a test split and train one model per fold.
    Train {
        /// Patch archive directory.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score the fold ensemble on the test split.
    Evaluate {
        /// Patch archive directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        models: PathBuf,
        /// Screened footprint table for footprint-level metrics.
        #[arg(long)]
        footprints: PathBuf,
    },
    /// Map biomass and its uncertainty over a whole stack.
    Predict {
        #[arg(long)]
        stack: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        models: PathBuf,
        /// Forest mask raster (1 forest, 0 other).
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Patchify { .. } => "patchify",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.global.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if cli.global.threads > 1 {
        log::warn!(
            "running single-threaded; --threads {} is recorded only",
            cli.global.threads
        );
    }

    let start = Instant::now();
    let mut m = RunManifest::new(cli.command.name(), &cli.global);
    let result = commands::run(&cli.command, &cli.global, &mut m);
    m.wall_time_s = start.elapsed().as_secs_f64();
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            m.status = "failed".into();
            m.error = Some(e.to_string());
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    };
    if let Err(e) = m.write(&cli.global.out) {
        eprintln!("error: could not write run manifest: {e}");
        return ExitCode::from(if code == 0 { 2 } else { code });
    }
    ExitCode::from(code)
}
