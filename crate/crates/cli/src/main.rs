//! `hdsim`: simulate, fit, select basis sizes, benchmark and predict.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdsim::experiments::Scenario;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(hdsim::Error),
}

impl From<hdsim::Error> for CliError {
    fn from(e: hdsim::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hdsim", version, about = "Bayesian single-index model for high-dimensional longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset files.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// High-dimensional covariates, one row per subject
    #[arg(long)]
    pub x_file: Option<PathBuf>,
    /// Low-dimensional covariates, one row per subject
    #[arg(long)]
    pub z_file: PathBuf,
    /// Observations with columns subject_id, region_id, time_raw, time_scaled, value
    #[arg(long)]
    pub observations: PathBuf,
    /// Number of regions; defaults to the largest region id plus one
    #[arg(long)]
    pub regions: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated dataset and its truth file
    Simulate {
        #[arg(long, default_value = "nonlinear")]
        scenario: Scenario,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 400)]
        p: usize,
        #[arg(long, default_value_t = 13)]
        regions: usize,
        #[arg(long, default_value_t = 5)]
        times: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the sampler and write the chain and a summary
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: config::RunArgs,
        /// Independent chains run concurrently; outputs get a ".<index>" suffix
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Chain file
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose basis sizes by BIC over random directions
    SelectK {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        variant: Option<hdsim::model::VariantKind>,
        /// Candidate sizes as "lo..hi" (inclusive) or a comma list
        #[arg(long, default_value = "7..20")]
        grid: String,
        /// Random directions per candidate
        #[arg(long, default_value_t = 10)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Table of the K pass; the K' pass goes to "<out>.kprime.csv"
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulation study comparing the single-index fit with a horseshoe linear fit
    Benchmark {
        #[arg(long, default_value = "nonlinear")]
        scenario: Scenario,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        p: usize,
        #[arg(long, default_value_t = 5)]
        replications: usize,
        #[arg(long, default_value_t = 13)]
        regions: usize,
        #[arg(long, default_value_t = 5)]
        times: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1500)]
        iterations: usize,
        #[arg(long, default_value_t = 500)]
        burn_in: usize,
        /// Overrides the sample-size schedule of K
        #[arg(long)]
        basis_k: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        m1: f64,
        #[arg(long, default_value_t = 10.0)]
        m2: f64,
        #[arg(long, default_value_t = 0.05)]
        slab_q: f64,
        #[arg(long, default_value_t = 0.01)]
        step_size: f64,
        #[arg(long, default_value_t = 20)]
        leapfrog: usize,
        /// Summary table; per-replication rows go to "<out>.replications.csv"
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior-mean predictions of a fitted chain at test observations
    Predict {
        #[arg(long)]
        chain: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Fit summary; defaults to "<chain>.summary.json"
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("HDSIM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("HDSIM_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate {
            scenario,
            n,
            p,
            regions,
            times,
            seed,
            out_dir,
        } => commands::simulate(scenario, n, p, regions, times, seed, &out_dir),
        Command::Fit { data, run, chains, out } => commands::fit(&data, &run, chains, &out),
        Command::SelectK {
            data,
            variant,
            grid,
            draws,
            seed,
            out,
        } => commands::select_k(&data, variant, &grid, draws, seed, out.as_deref()),
        Command::Benchmark {
            scenario,
            n,
            p,
            replications,
            regions,
            times,
            seed,
            iterations,
            burn_in,
            basis_k,
            m1,
            m2,
            slab_q,
            step_size,
            leapfrog,
            out,
        } => {
            if replications == 0 {
                return Err(CliError::Usage("--replications must be at least 1".into()));
            }
            let mut cfg = hdsim::experiments::BenchmarkConfig::new(scenario, n, p, replications, seed);
            cfg.regions = regions;
            cfg.times = times;
            cfg.iterations = iterations;
            cfg.burn_in = burn_in;
            cfg.basis_k = basis_k;
            cfg.m1 = m1;
            cfg.m2 = m2;
            cfg.initial_q = slab_q;
            cfg.step_size = step_size;
            cfg.leapfrog_steps = leapfrog;
            commands::benchmark(&cfg, &out)
        }
        Command::Predict { chain, data, summary, out } => commands::predict(&chain, &data, summary.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
