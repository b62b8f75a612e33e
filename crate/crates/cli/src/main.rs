mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stcopula::interpolate::InterpolationMode;
use stcopula::Granularity;

use config::{parse_granularity, PipelineConfig, Protocol};
use error::CliError;
use stages::{Workspace, STAGES};

#[derive(Parser, Debug)]
#[command(name = "stcopula", version, about = "Spatio-temporal copula interpolation of station data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    #[arg(long, global = true)]
    mode: Option<InterpolationMode>,
    #[arg(long, global = true)]
    observations: Option<PathBuf>,
    #[arg(long, global = true)]
    stations: Option<PathBuf>,
    #[arg(long, global = true)]
    radius_m: Option<f64>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    max_lag: Option<usize>,
    #[arg(long, global = true)]
    k_donors: Option<usize>,
    #[arg(long, global = true)]
    cell_deg: Option<f64>,
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Validation protocols for `evaluate` (repeatable).
    #[arg(long, global = true, value_enum)]
    protocol: Vec<Protocol>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Read the observation and station CSVs and resample onto buckets.
    Ingest,
    /// Group stations into radius-bounded clusters.
    Cluster,
    /// Impute missing cells with per-station bidirectional LSTMs.
    Gapfill,
    /// Fit lag dependence, margins, copula and lag tables.
    Fit,
    /// Render the interpolated field on a lat/lon grid.
    Interpolate,
    /// Score the pipeline by holdout and leave-one-station-out.
    Evaluate,
    /// Every stage in order.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Cluster => "cluster",
            Command::Gapfill => "gapfill",
            Command::Fit => "fit",
            Command::Interpolate => "interpolate",
            Command::Evaluate => "evaluate",
            Command::All => "all",
        }
    }
}

fn configure(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    set!(cli.out => data.out_dir);
    set!(cli.observations => data.observations);
    set!(cli.stations => data.stations);
    set!(cli.granularity => granularity);
    set!(cli.mode => model.interpolate.mode);
    set!(cli.radius_m => model.cluster.radius_m);
    set!(cli.hidden => model.gapfill.hidden);
    set!(cli.window => model.gapfill.window);
    set!(cli.epochs => model.gapfill.epochs);
    set!(cli.learning_rate => model.gapfill.learning_rate);
    set!(cli.max_lag => model.lagdep.max_lag);
    set!(cli.k_donors => model.interpolate.k_donors);
    set!(cli.cell_deg => export.cell_deg);
    set!(cli.fraction => eval.fraction);
    if !cli.protocol.is_empty() {
        cfg.eval.protocols = cli.protocol.clone();
    }
    cfg.model.gapfill.seed = cfg.seed.unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = configure(cli)?;
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {threads} worker threads: {e}")))?;
    let ws = Workspace::new(&cfg.data.out_dir)?;
    let command = cli.command.name();
    let stages: Vec<&str> = match cli.command {
        Command::All => STAGES.to_vec(),
        _ => vec![command],
    };
    pool.install(|| stages::run(command, &stages, &cfg, pool.current_num_threads(), &ws))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
