use std::path::Path;

use clap::Args;
use serde::Deserialize;

use hdsim::model::{VariantKind, VariantSpec};
use hdsim::priors::SpikeSlabConfig;
use hdsim::sampler::{ChainConfig, ReflectionMode};

use crate::CliError;

/// Sampler and prior flags shared by the fitting commands. Unset flags fall
/// back to the config file, then to defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML file with any of the settings below
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub variant: Option<VariantKind>,
    /// Spike exponent M1, in (0, 1)
    #[arg(long)]
    pub m1: Option<f64>,
    /// Spike exponent M2, at least 1
    #[arg(long)]
    pub m2: Option<f64>,
    /// Initial slab probability q
    #[arg(long)]
    pub slab_q: Option<f64>,
    /// Surface basis size K
    #[arg(long)]
    pub basis_k: Option<usize>,
    /// Time-warp basis size K'
    #[arg(long)]
    pub basis_kprime: Option<usize>,
    /// Prior standard deviation of surface coefficients
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub d1: Option<f64>,
    #[arg(long)]
    pub d2: Option<f64>,
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Leapfrog steps per trajectory
    #[arg(long)]
    pub leapfrog: Option<usize>,
    /// Total iterations, burn-in included
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<ReflectionMode>,
    /// Target window of the model size, as "lo,hi"
    #[arg(long)]
    pub size_window: Option<String>,
    /// Keep q fixed
    #[arg(long)]
    pub fixed_q: bool,
}

#[derive(Deserialize, Debug, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<String>,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub slab_q: Option<f64>,
    pub basis_k: Option<usize>,
    pub basis_kprime: Option<usize>,
    pub a: Option<f64>,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub step_size: Option<f64>,
    pub leapfrog: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub size_window: Option<[usize; 2]>,
    pub fixed_q: Option<bool>,
}

pub fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn parse_window(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("size window must be 'lo,hi', got '{s}'"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

pub const DEFAULT_BASIS: usize = 8;
pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_BURN_IN: usize = 1000;

/// Resolves flags, file values and defaults into a chain configuration.
pub fn resolve(args: &RunArgs) -> Result<ChainConfig, CliError> {
    let file = match &args.config {
        Some(p) => read_file_config(p)?,
        None => FileConfig::default(),
    };
    let usage = |e: hdsim::Error| CliError::Usage(e.to_string());
    let kind = match (args.variant, &file.variant) {
        (Some(k), _) => k,
        (None, Some(s)) => s.parse().map_err(usage)?,
        (None, None) => VariantKind::Base,
    };
    let mode = match (args.mode, &file.mode) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse().map_err(usage)?,
        (None, None) => ReflectionMode::default(),
    };
    let k = args.basis_k.or(file.basis_k).unwrap_or(DEFAULT_BASIS);
    let kp = args.basis_kprime.or(file.basis_kprime).unwrap_or(k);
    let mut spec = VariantSpec::new(kind, k, kp);
    let defaults = SpikeSlabConfig::default();
    spec.spike = SpikeSlabConfig::new(
        args.m1.or(file.m1).unwrap_or(defaults.m1()),
        args.m2.or(file.m2).unwrap_or(defaults.m2()),
        args.slab_q.or(file.slab_q).unwrap_or(defaults.q()),
    )
    .map_err(usage)?;
    spec.a = args.a.or(file.a).unwrap_or(spec.a);
    spec.d1 = args.d1.or(file.d1).unwrap_or(spec.d1);
    spec.d2 = args.d2.or(file.d2).unwrap_or(spec.d2);
    spec.validate().map_err(usage)?;

    let mut cfg = ChainConfig::new(
        spec,
        args.iterations.or(file.iterations).unwrap_or(DEFAULT_ITERATIONS),
        args.burn_in.or(file.burn_in).unwrap_or(DEFAULT_BURN_IN),
        args.seed.or(file.seed).unwrap_or(1),
    );
    cfg.thin = args.thin.or(file.thin).unwrap_or(1);
    cfg.mode = mode;
    cfg.hmc.step_size = args.step_size.or(file.step_size).unwrap_or(cfg.hmc.step_size);
    cfg.hmc.leapfrog_steps = args.leapfrog.or(file.leapfrog).unwrap_or(cfg.hmc.leapfrog_steps);
    cfg.adapt_q_target = match (&args.size_window, file.size_window) {
        (Some(s), _) => parse_window(s)?,
        (None, Some([lo, hi])) => (lo, hi),
        (None, None) => cfg.adapt_q_target,
    };
    cfg.adapt_q = !(args.fixed_q || file.fixed_q.unwrap_or(false));
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}
