mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evpan::io::Config;

#[derive(Debug, Parser)]
#[command(name = "evpan", version, about = "Evidential LiDAR panoptic segmentation toolkit")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pknn,
    Uqr,
    /// Both, in the configured `refine.order`.
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scans, labels, voxel predictions and BEV center maps.
    Synth,
    /// Fuse voxel predictions and BEV maps into per-point panoptic labels.
    Fuse {
        /// Directory with velodyne/, predictions/ and bev/.
        #[arg(long)]
        input: PathBuf,
    },
    /// Refine fused predictions with pKNN and/or uQR.
    Refine {
        /// Directory with labels/ and alpha/ from `fuse`.
        #[arg(long)]
        input: PathBuf,
        /// Directory with the matching velodyne/ scans.
        #[arg(long)]
        scans: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Pknn)]
        mode: Mode,
        /// Only time pKNN at these thresholds and write stats.csv.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
        /// Runs per sweep threshold; the fastest is reported.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// Directory with ground-truth labels/.
        #[arg(long)]
        gt: PathBuf,
        /// Directory with predicted labels/ and alpha/.
        #[arg(long)]
        pred: PathBuf,
    },
    /// Train the linear evidential classifier on Gaussian blobs.
    Toytrain,
}

fn load_config(cli: &Cli) -> Result<Config, commands::CliError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(commands::CliError::config)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.check().map_err(commands::CliError::config)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    let config = load_config(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| commands::CliError::Setup(e.to_string()))?;
    let ctx = commands::Context::new(config, cli.config.clone(), cli.out.clone())?;
    pool.install(|| match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Fuse { input } => commands::fuse(&ctx, &input),
        Command::Refine {
            input,
            scans,
            mode,
            sweep,
            repeat,
        } => commands::refine(&ctx, &input, &scans, mode, &sweep, repeat.max(1)),
        Command::Evaluate { gt, pred } => commands::evaluate(&ctx, &gt, &pred),
        Command::Toytrain => commands::toytrain(&ctx),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evpan: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
