//! Hybrid MCMC: reflective HMC for angles and time-warp increments, Gibbs
//! for surfaces, error variance, indicators and random effects.

use std::collections::VecDeque;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Block, Dataset, Model, ModelState, VariantSpec};
use crate::priors::gibbs_indicator;
use crate::{Error, Result};

/// Folds `x` into `[lo, hi]` by repeated reflection at both walls.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    reflect_with_parity(x, lo, hi).0
}

/// Reflected position and whether an odd number of wall hits occurred
/// (the momentum sign flips iff so).
pub fn reflect_with_parity(x: f64, lo: f64, hi: f64) -> (f64, bool) {
    if x >= lo && x <= hi {
        return (x, false);
    }
    if !lo.is_finite() || !hi.is_finite() {
        // one-sided wall
        if x < lo {
            return (2.0 * lo - x, true);
        }
        return (2.0 * hi - x, true);
    }
    let w = hi - lo;
    let y = (x - lo).rem_euclid(2.0 * w);
    if y > w {
        (hi - (y - w), true)
    } else {
        (lo + y, false)
    }
}

/// How trajectories handle the walls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReflectionMode {
    /// Reflect inside the leapfrog and negate the momentum.
    #[default]
    LeapfrogReflection,
    /// Integrate on the mirror-extended potential and fold only the final
    /// candidate.
    PaperReflection,
}

impl std::str::FromStr for ReflectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leapfrog-reflection" => Ok(ReflectionMode::LeapfrogReflection),
            "paper-reflection" => Ok(ReflectionMode::PaperReflection),
            other => Err(Error::invalid(format!("unknown reflection mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Diagonal mass; empty means identity.
    pub mass: Vec<f64>,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.01,
            leapfrog_steps: 20,
            mass: Vec::new(),
            target_accept: 0.7,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::invalid("leapfrog steps must be at least 1"));
        }
        if self.mass.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::invalid("mass entries must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target acceptance must lie in (0, 1)"));
        }
        Ok(())
    }

    fn mass(&self, i: usize) -> f64 {
        self.mass.get(i).copied().unwrap_or(1.0)
    }
}

/// Log density and gradient at a point, or `None` outside the support.
pub type LogDensity = Option<(f64, Vec<f64>)>;

fn finite(ld: &LogDensity) -> bool {
    matches!(ld, Some((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()))
}

/// Leapfrog integration of `H = −log π(q) + Σ p²/2m` with reflection.
///
/// Returns the final position, momentum and log density, or `None` when a
/// non-finite density or gradient is met.
#[allow(clippy::too_many_arguments)]
pub fn leapfrog_reflective<F>(
    q0: &[f64],
    p0: &[f64],
    start: (f64, Vec<f64>),
    mut log_density: F,
    bounds: &[(f64, f64)],
    cfg: &HmcConfig,
    mode: ReflectionMode,
) -> Option<(Vec<f64>, Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> LogDensity,
{
    let eps = cfg.step_size;
    let d = q0.len();
    let mut q = q0.to_vec();
    let mut p = p0.to_vec();
    // position handed to the target: equals `q` in the reflecting mode
    let mut folded = q0.to_vec();
    let mut sign = vec![1.0; d];
    let (mut logp, mut grad) = start;
    for _ in 0..cfg.leapfrog_steps {
        for i in 0..d {
            p[i] += 0.5 * eps * sign[i] * grad[i];
        }
        for i in 0..d {
            q[i] += eps * p[i] / cfg.mass(i);
            let (lo, hi) = bounds[i];
            let (r, flip) = reflect_with_parity(q[i], lo, hi);
            match mode {
                ReflectionMode::LeapfrogReflection => {
                    q[i] = r;
                    if flip {
                        p[i] = -p[i];
                    }
                    folded[i] = r;
                }
                ReflectionMode::PaperReflection => {
                    folded[i] = r;
                    sign[i] = if flip { -1.0 } else { 1.0 };
                }
            }
        }
        let next = log_density(&folded);
        if !finite(&next) {
            return None;
        }
        let (v, g) = next.expect("checked finite");
        logp = v;
        grad = g;
        for i in 0..d {
            p[i] += 0.5 * eps * sign[i] * grad[i];
        }
    }
    if mode == ReflectionMode::PaperReflection {
        for i in 0..d {
            p[i] *= sign[i];
        }
    }
    Some((folded, p, logp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmcOutcome {
    pub accepted: bool,
    pub accept_prob: f64,
    pub position: Vec<f64>,
    pub log_density: f64,
}

fn kinetic(p: &[f64], cfg: &HmcConfig) -> f64 {
    p.iter().enumerate().map(|(i, v)| v * v / (2.0 * cfg.mass(i))).sum()
}

/// One Metropolis-adjusted HMC transition.
pub fn hmc_step<F, R>(
    q0: &[f64],
    mut log_density: F,
    bounds: &[(f64, f64)],
    cfg: &HmcConfig,
    mode: ReflectionMode,
    rng: &mut R,
) -> HmcOutcome
where
    F: FnMut(&[f64]) -> LogDensity,
    R: Rng + ?Sized,
{
    let start = log_density(q0);
    let reject = |start: &LogDensity| {
        HmcOutcome {
            accepted: false,
            accept_prob: 0.0,
            position: q0.to_vec(),
            log_density: start.as_ref().map_or(f64::NEG_INFINITY, |s| s.0),
        }
    };
    if !finite(&start) {
        return reject(&start);
    }
    let p0: Vec<f64> = (0..q0.len())
        .map(|i| cfg.mass(i).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (logp0, grad0) = start.clone().expect("finite start");
    let h0 = -logp0 + kinetic(&p0, cfg);
    let end = leapfrog_reflective(q0, &p0, (logp0, grad0), &mut log_density, bounds, cfg, mode);
    let Some((q1, p1, logp1)) = end else {
        return reject(&start);
    };
    // exact wall positions are outside the open supports
    if q1.iter().zip(bounds).any(|(&x, &(lo, hi))| x <= lo || x >= hi) {
        return reject(&start);
    }
    let h1 = -logp1 + kinetic(&p1, cfg);
    let accept_prob = (h0 - h1).exp().min(1.0);
    let accept_prob = if accept_prob.is_nan() { 0.0 } else { accept_prob };
    if rng.random::<f64>() < accept_prob {
        HmcOutcome {
            accepted: true,
            accept_prob,
            position: q1,
            log_density: logp1,
        }
    } else {
        let mut out = reject(&start);
        out.accept_prob = accept_prob;
        out
    }
}

/// HMC update of one model block; returns the acceptance probability and
/// whether the proposal was accepted.
pub fn hmc_block_update<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ModelState,
    block: Block,
    cfg: &HmcConfig,
    mode: ReflectionMode,
    rng: &mut R,
) -> (f64, bool) {
    let q0 = model.block_values(state, block);
    let bounds = model.block_bounds(state, block);
    let mut work = state.clone();
    let target = |q: &[f64]| -> LogDensity {
        model.set_block(&mut work, block, q);
        model.block_log_density(&work, block).ok()
    };
    let out = hmc_step(&q0, target, &bounds, cfg, mode, rng);
    if out.accepted {
        model.set_block(state, block, &out.position);
    }
    (out.accept_prob, out.accepted)
}

/// Which updates a sweep performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub surfaces: bool,
    pub sigma2: bool,
    pub theta: bool,
    pub alpha: bool,
    pub deltas: bool,
    pub indicators: bool,
    pub random_effects: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        SweepPlan {
            surfaces: true,
            sigma2: true,
            theta: true,
            alpha: true,
            deltas: true,
            indicators: true,
            random_effects: true,
        }
    }
}

/// Largest θ dimension updated as one block.
pub const THETA_BLOCK_LIMIT: usize = 5000;
/// Sub-block size when θ is split.
pub const THETA_SUB_BLOCK: usize = 2000;

/// HMC blocks of a model, in update order.
pub fn hmc_blocks(model: &Model) -> Vec<Block> {
    let mut out = Vec::new();
    if model.spec().kind.uses_x() {
        let n = model.data().p() - 1;
        if n > THETA_BLOCK_LIMIT {
            let mut s = 0;
            while s < n {
                let e = (s + THETA_SUB_BLOCK).min(n);
                out.push(Block::Theta { start: s, end: e });
                s = e;
            }
        } else {
            out.push(Block::Theta { start: 0, end: n });
        }
    }
    for a in 0..model.num_alpha() {
        out.push(Block::Alpha(a));
    }
    out.push(Block::Deltas);
    out
}

pub fn block_name(b: Block) -> String {
    match b {
        Block::Theta { start, end } => format!("theta[{start}..{end}]"),
        Block::Alpha(a) => format!("alpha[{a}]"),
        Block::Deltas => "deltas".to_string(),
    }
}

/// Dual-averaging step-size controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: u64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(step_size: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * step_size).ln(),
            log_eps: step_size.ln(),
            log_eps_bar: step_size.ln(),
            h_bar: 0.0,
            t: 0,
            target,
        }
    }

    /// Feeds one acceptance probability; returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1;
        let t = self.t as f64;
        let eta = 1.0 / (t + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_eps = (self.mu - t.sqrt() / Self::GAMMA * self.h_bar).clamp(-14.0, 1.0);
        let w = t.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.log_eps.exp()
    }

    /// Averaged step size used once adaptation stops.
    pub fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Mutable sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub hmc: Vec<HmcConfig>,
    pub averagers: Vec<DualAveraging>,
    pub q: f64,
    pub size_window: (usize, usize),
    pub adapt_q: bool,
    pub frozen: bool,
}

impl Tuning {
    pub fn new(blocks: usize, base: &HmcConfig, q: f64, size_window: (usize, usize), adapt_q: bool) -> Self {
        Tuning {
            hmc: vec![base.clone(); blocks],
            averagers: (0..blocks)
                .map(|_| DualAveraging::new(base.step_size, base.target_accept))
                .collect(),
            q,
            size_window,
            adapt_q,
            frozen: false,
        }
    }
}

/// What one adaptation step sees.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptStats {
    pub in_burn_in: bool,
    pub accept_probs: Vec<f64>,
    /// Running mean of the model size, when indicators are sampled.
    pub mean_model_size: Option<f64>,
}

/// Q adjustment factor per adaptation step.
pub const Q_FACTOR: f64 = 1.05;

/// One adaptation step. Outside burn-in the settings are returned
/// unchanged; the first such call replaces each step size by its average.
pub fn adapt(stats: &AdaptStats, tuning: &Tuning) -> Tuning {
    let mut next = tuning.clone();
    if tuning.frozen {
        return next;
    }
    if !stats.in_burn_in {
        for (h, da) in next.hmc.iter_mut().zip(&next.averagers) {
            h.step_size = da.final_step();
        }
        next.frozen = true;
        return next;
    }
    for ((h, da), &a) in next.hmc.iter_mut().zip(next.averagers.iter_mut()).zip(&stats.accept_probs) {
        h.step_size = da.update(a);
    }
    if let (true, Some(size)) = (tuning.adapt_q, stats.mean_model_size) {
        let (lo, hi) = tuning.size_window;
        if size > hi as f64 {
            next.q = (tuning.q / Q_FACTOR).max(1e-12);
        } else if size < lo as f64 {
            next.q = (tuning.q * Q_FACTOR).min(0.5);
        }
    }
    next
}

/// Outcome of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepStats {
    pub accept_probs: Vec<f64>,
    pub accepted: Vec<bool>,
    pub model_size: Option<usize>,
}

/// One full iteration: surfaces, σ², HMC blocks, indicators, then random
/// effects with the DP mixture.
pub fn sweep<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ModelState,
    tuning: &Tuning,
    plan: &SweepPlan,
    mode: ReflectionMode,
    rng: &mut R,
) -> Result<SweepStats> {
    if plan.surfaces {
        model.gibbs_surfaces(state, rng)?;
    }
    if plan.sigma2 {
        model.gibbs_sigma2(state, rng)?;
    }
    let blocks = hmc_blocks(model);
    let mut accept_probs = vec![0.0; blocks.len()];
    let mut accepted = vec![false; blocks.len()];
    for (b, &block) in blocks.iter().enumerate() {
        let on = match block {
            Block::Theta { .. } => plan.theta,
            Block::Alpha(_) => plan.alpha,
            Block::Deltas => plan.deltas,
        };
        if on {
            let (a, acc) = hmc_block_update(model, state, block, &tuning.hmc[b], mode, rng);
            accept_probs[b] = a;
            accepted[b] = acc;
        }
    }
    let mut model_size = None;
    if let (Some(theta), Some(gamma)) = (&state.theta, state.gamma.as_mut()) {
        if plan.indicators {
            let cfg = &model.spec().spike;
            let n = theta.len();
            for (r, &th) in theta.as_slice().iter().enumerate() {
                gamma.set(r, gibbs_indicator(th, r + 1 == n, cfg, rng));
            }
        }
        model_size = Some(gamma.model_size());
    }
    if plan.random_effects && model.spec().kind.has_random_effects() {
        model.gibbs_random_effects(state, rng)?;
    }
    Ok(SweepStats {
        accept_probs,
        accepted,
        model_size,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Total iterations including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_q_target: (usize, usize),
    /// Whether the slab probability is tuned toward `adapt_q_target`.
    pub adapt_q: bool,
    pub variant: VariantSpec,
    pub hmc: HmcConfig,
    pub mode: ReflectionMode,
}

impl ChainConfig {
    pub fn new(variant: VariantSpec, iterations: usize, burn_in: usize, seed: u64) -> Self {
        ChainConfig {
            iterations,
            burn_in,
            thin: 1,
            seed,
            adapt_q_target: (20, 30),
            adapt_q: true,
            variant,
            hmc: HmcConfig::default(),
            mode: ReflectionMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::invalid(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if self.adapt_q_target.0 > self.adapt_q_target.1 {
            return Err(Error::invalid("model-size window is empty"));
        }
        self.hmc.validate()?;
        self.variant.validate()
    }
}

/// Stored draws and diagnostics of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain<S> {
    pub draws: Vec<S>,
    /// Log posterior after every iteration, burn-in included.
    pub log_posterior: Vec<f64>,
    pub block_names: Vec<String>,
    /// Acceptance flags per post-burn-in iteration and block.
    pub acceptance: Vec<Vec<bool>>,
    /// Per-angle count of stored draws with the indicator on.
    pub inclusion_counts: Vec<u64>,
    /// Serialized configuration that produced the chain.
    pub config_json: String,
}

impl<S> Chain<S> {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn inclusion_frequencies(&self) -> Vec<f64> {
        let n = self.draws.len().max(1) as f64;
        self.inclusion_counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        let n = self.acceptance.len().max(1) as f64;
        (0..self.block_names.len())
            .map(|b| self.acceptance.iter().filter(|row| row[b]).count() as f64 / n)
            .collect()
    }
}

impl Chain<ModelState> {
    /// Posterior mean of `β`.
    pub fn posterior_mean_beta(&self) -> Option<Vec<f64>> {
        let first = self.draws.first()?.beta()?;
        let mut acc = vec![0.0; first.len()];
        for d in &self.draws {
            let b = d.beta()?;
            acc.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
        }
        let n = self.draws.len() as f64;
        Some(acc.into_iter().map(|v| v / n).collect())
    }

    /// Posterior mean of `|β|` per coordinate.
    pub fn posterior_mean_abs_beta(&self) -> Option<Vec<f64>> {
        let first = self.draws.first()?.beta()?;
        let mut acc = vec![0.0; first.len()];
        for d in &self.draws {
            let b = d.beta()?;
            acc.iter_mut().zip(&b).for_each(|(a, v)| *a += v.abs());
        }
        let n = self.draws.len() as f64;
        Some(acc.into_iter().map(|v| v / n).collect())
    }
}

const SIZE_WINDOW: usize = 50;

/// Runs one chain: burn-in with adaptation, then frozen sampling.
pub fn run_chain(data: &Dataset, config: &ChainConfig) -> Result<Chain<ModelState>> {
    config.validate()?;
    let mut model = Model::new(data, config.variant.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = model.initial_state(&mut rng)?;
    let lp0 = model.log_posterior(&state)?;
    if !lp0.is_finite() {
        let ll = model.log_likelihood(&state)?;
        return Err(Error::NonFinite(format!(
            "initial log posterior {lp0} (log likelihood {ll}, sigma2 {}, model size {:?})",
            state.sigma2,
            state.gamma.as_ref().map(|g| g.model_size())
        )));
    }
    let blocks = hmc_blocks(&model);
    let block_names: Vec<String> = blocks.iter().map(|&b| block_name(b)).collect();
    let mut tuning = Tuning::new(
        blocks.len(),
        &config.hmc,
        config.variant.spike.q(),
        config.adapt_q_target,
        config.adapt_q,
    );
    let plan = SweepPlan::default();
    let mut chain = Chain {
        draws: Vec::new(),
        log_posterior: Vec::with_capacity(config.iterations),
        block_names,
        acceptance: Vec::new(),
        inclusion_counts: vec![0; state.gamma.as_ref().map_or(0, |g| g.len())],
        config_json: serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?,
    };
    let mut sizes: VecDeque<usize> = VecDeque::with_capacity(SIZE_WINDOW);
    for it in 0..config.iterations {
        let stats = sweep(&model, &mut state, &tuning, &plan, config.mode, &mut rng)?;
        let lp = model.log_posterior(&state)?;
        chain.log_posterior.push(lp);
        if let Some(s) = stats.model_size {
            if sizes.len() == SIZE_WINDOW {
                sizes.pop_front();
            }
            sizes.push_back(s);
        }
        let in_burn_in = it < config.burn_in;
        let mean_size = (!sizes.is_empty()).then(|| sizes.iter().sum::<usize>() as f64 / sizes.len() as f64);
        tuning = adapt(
            &AdaptStats {
                in_burn_in,
                accept_probs: stats.accept_probs.clone(),
                mean_model_size: mean_size,
            },
            &tuning,
        );
        model.spec_mut().spike.set_q(tuning.q);
        if !in_burn_in {
            chain.acceptance.push(stats.accepted.clone());
            if (it - config.burn_in) % config.thin == 0 {
                if let Some(g) = &state.gamma {
                    for (c, &on) in chain.inclusion_counts.iter_mut().zip(g.as_slice()) {
                        *c += on as u64;
                    }
                }
                chain.draws.push(state.clone());
            }
        }
        if (it + 1) % 100 == 0 {
            debug!(
                "iteration {}: log posterior {lp:.3}, model size {:?}, q {:.4}, steps {:?}",
                it + 1,
                stats.model_size,
                tuning.q,
                tuning.hmc.iter().map(|h| h.step_size).collect::<Vec<_>>()
            );
        }
    }
    info!(
        "chain finished: {} draws, acceptance {:?}",
        chain.draws.len(),
        chain.acceptance_rates()
    );
    Ok(chain)
}

/// Seed of chain `c` derived from a base seed.
pub fn chain_seed(seed: u64, c: usize) -> u64 {
    let mut z = seed.wrapping_add((c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `n` independent chains in parallel with derived seeds.
pub fn run_chains(data: &Dataset, config: &ChainConfig, n: usize) -> Vec<Result<Chain<ModelState>>> {
    (0..n)
        .into_par_iter()
        .map(|c| {
            let mut cfg = config.clone();
            cfg.seed = if n == 1 { config.seed } else { chain_seed(config.seed, c) };
            run_chain(data, &cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_data;
    use crate::model::VariantKind;
    use std::f64::consts::PI;

    #[test]
    fn reflect_examples() {
        assert!((reflect(PI + 0.3, 0.0, PI) - (PI - 0.3)).abs() < 1e-12);
        assert!((reflect(-0.2, 0.0, PI) - 0.2).abs() < 1e-12);
        let r = reflect(7.0, 0.0, PI);
        assert!((r - (7.0 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(reflect(1.0, 0.0, PI), 1.0);
        assert_eq!(reflect(reflect(9.3, 0.0, 1.0), 0.0, 1.0), reflect(9.3, 0.0, 1.0));
        assert_eq!(reflect(-3.0, f64::NEG_INFINITY, f64::INFINITY), -3.0);
    }

    #[test]
    fn straight_line_without_gradient() {
        let cfg = HmcConfig {
            step_size: 0.01,
            leapfrog_steps: 10,
            ..Default::default()
        };
        let flat = |q: &[f64]| Some((0.0, vec![0.0; q.len()]));
        let (q, p, _) = leapfrog_reflective(
            &[0.5, 0.5],
            &[1.0, -2.0],
            (0.0, vec![0.0; 2]),
            flat,
            &[(0.0, 1.0); 2],
            &cfg,
            ReflectionMode::LeapfrogReflection,
        )
        .unwrap();
        assert!((q[0] - 0.6).abs() < 1e-12 && (q[1] - 0.3).abs() < 1e-12);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    fn gaussian(q: &[f64]) -> LogDensity {
        Some((-0.5 * q.iter().map(|x| x * x).sum::<f64>(), q.iter().map(|x| -x).collect()))
    }

    #[test]
    fn reversible_with_wall_hits() {
        let cfg = HmcConfig {
            step_size: 0.2,
            leapfrog_steps: 25,
            ..Default::default()
        };
        let bounds = [(0.0, 1.5), (-1.0, 0.7), (0.0, PI)];
        let q0 = [0.4, 0.1, 3.0];
        let p0 = [2.5, -3.0, 1.7];
        let (q1, p1, _) = leapfrog_reflective(&q0, &p0, gaussian(&q0).unwrap(), gaussian, &bounds, &cfg, ReflectionMode::LeapfrogReflection).unwrap();
        let back: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (q2, p2, _) = leapfrog_reflective(&q1, &back, gaussian(&q1).unwrap(), gaussian, &bounds, &cfg, ReflectionMode::LeapfrogReflection).unwrap();
        for i in 0..3 {
            assert!((q2[i] - q0[i]).abs() < 1e-8);
            assert!((p2[i] + p0[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let run = |eps: f64| {
            let cfg = HmcConfig {
                step_size: eps,
                leapfrog_steps: (1.0 / eps).round() as usize,
                ..Default::default()
            };
            let q0 = [1.0];
            let p0 = [0.5];
            let (q, p, _) = leapfrog_reflective(&q0, &p0, gaussian(&q0).unwrap(), gaussian, &[(f64::NEG_INFINITY, f64::INFINITY)], &cfg, ReflectionMode::LeapfrogReflection).unwrap();
            let h = |q: f64, p: f64| 0.5 * q * q + 0.5 * p * p;
            (h(q[0], p[0]) - h(q0[0], p0[0])).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!((ratio - 4.0).abs() < 0.5, "{ratio}");
    }

    #[test]
    fn tiny_steps_always_accept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = HmcConfig {
            step_size: 1e-7,
            leapfrog_steps: 1,
            ..Default::default()
        };
        for _ in 0..100 {
            let out = hmc_step(&[0.3], gaussian, &[(f64::NEG_INFINITY, f64::INFINITY)], &cfg, ReflectionMode::LeapfrogReflection, &mut rng);
            assert!(out.accept_prob > 1.0 - 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = HmcConfig::default();
        let bad = |q: &[f64]| {
            if q[0] > 0.5001 {
                Some((f64::NAN, vec![0.0]))
            } else {
                Some((0.0, vec![1e3]))
            }
        };
        let out = hmc_step(&[0.5], bad, &[(0.0, 1.0)], &cfg, ReflectionMode::LeapfrogReflection, &mut rng);
        assert!(!out.accepted);
        assert_eq!(out.position, vec![0.5]);
    }

    #[test]
    fn two_state_occupancy_matches_ratio() {
        // density 1 on (0,1) and 3 on (1,2), smoothed by a steep logistic ramp
        let target = |q: &[f64]| {
            let s = 1.0 / (1.0 + (-(q[0] - 1.0) * 200.0).exp());
            let v = (1.0 + 2.0 * s).ln();
            let dv = 2.0 * 200.0 * s * (1.0 - s) / (1.0 + 2.0 * s);
            Some((v, vec![dv]))
        };
        let cfg = HmcConfig {
            step_size: 0.05,
            leapfrog_steps: 15,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = vec![0.5];
        let n = 40_000;
        let mut hi = 0usize;
        for _ in 0..n {
            q = hmc_step(&q, target, &[(0.0, 2.0)], &cfg, ReflectionMode::LeapfrogReflection, &mut rng).position;
            hi += (q[0] > 1.0) as usize;
        }
        let frac = hi as f64 / n as f64;
        // successive draws are close to independent at this trajectory length
        assert!((frac - 0.75).abs() < 0.02, "{frac}");
    }

    #[test]
    fn fold_mode_samples_uniform() {
        let flat = |q: &[f64]| Some((0.0, vec![0.0; q.len()]));
        let cfg = HmcConfig {
            step_size: 0.37,
            leapfrog_steps: 7,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = vec![0.2];
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            q = hmc_step(&q, flat, &[(0.0, PI)], &cfg, ReflectionMode::PaperReflection, &mut rng).position;
            s += q[0];
            s2 += q[0] * q[0];
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - PI / 2.0).abs() < 0.05);
        assert!((var - PI * PI / 12.0).abs() < 0.05);
    }

    #[test]
    fn adaptation_control_laws() {
        let base = HmcConfig::default();
        let t = Tuning::new(1, &base, 0.05, (20, 30), true);
        let stats = AdaptStats {
            in_burn_in: true,
            accept_probs: vec![1.0],
            mean_model_size: Some(40.0),
        };
        let next = adapt(&stats, &t);
        assert!(next.q < t.q);
        assert!(next.hmc[0].step_size > base.step_size);
        let low = adapt(&AdaptStats { mean_model_size: Some(5.0), ..stats.clone() }, &t);
        assert!(low.q > t.q);
        let inside = adapt(&AdaptStats { mean_model_size: Some(25.0), ..stats.clone() }, &t);
        assert_eq!(inside.q, t.q);

        let frozen = adapt(&AdaptStats { in_burn_in: false, ..stats.clone() }, &next);
        assert!(frozen.frozen);
        let again = adapt(&stats, &frozen);
        assert_eq!(again, frozen);
    }

    fn toy_config(seed: u64) -> (Dataset, ChainConfig) {
        let d = toy_data(6, 12, 3, 2, 3, 40);
        let mut spec = VariantSpec::new(VariantKind::Base, 4, 4);
        spec.a = 3.0;
        let mut cfg = ChainConfig::new(spec, 60, 20, seed);
        cfg.adapt_q_target = (1, 5);
        cfg.hmc.leapfrog_steps = 5;
        (d, cfg)
    }

    #[test]
    fn sweep_preserves_invariants() {
        for kind in [VariantKind::Base, VariantKind::RandomEffectRegionwise, VariantKind::NoSnp] {
            let d = toy_data(6, if kind.uses_x() { 12 } else { 0 }, 3, 2, 3, 41);
            let m = Model::new(&d, VariantSpec::new(kind, 4, 4)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut s = m.initial_state(&mut rng).unwrap();
            let t = Tuning::new(hmc_blocks(&m).len(), &HmcConfig::default(), 0.05, (1, 3), true);
            for _ in 0..10 {
                sweep(&m, &mut s, &t, &SweepPlan::default(), ReflectionMode::LeapfrogReflection, &mut rng).unwrap();
                s.validate().unwrap();
                assert!(m.log_posterior(&s).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn chains_are_deterministic_and_finite() {
        let (d, cfg) = toy_config(9);
        let a = run_chain(&d, &cfg).unwrap();
        let b = run_chain(&d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.draws.len(), 40);
        assert!(a.log_posterior.iter().all(|v| v.is_finite()));
        assert!(a.inclusion_counts.iter().all(|&c| c as usize <= a.draws.len()));
        let mut cfg2 = cfg.clone();
        cfg2.thin = 3;
        let c = run_chain(&d, &cfg2).unwrap();
        assert_eq!(c.draws.len(), 14);
    }

    #[test]
    fn theta_split_into_sub_blocks() {
        let d = toy_data(2, 5003, 3, 1, 1, 42);
        let m = Model::new(&d, VariantSpec::new(VariantKind::Base, 4, 4)).unwrap();
        let blocks = hmc_blocks(&m);
        assert_eq!(
            &blocks[..3],
            &[
                Block::Theta { start: 0, end: 2000 },
                Block::Theta { start: 2000, end: 4000 },
                Block::Theta { start: 4000, end: 5002 }
            ]
        );
    }

    #[test]
    fn invalid_chain_config() {
        let (d, mut cfg) = toy_config(1);
        cfg.burn_in = cfg.iterations;
        assert!(run_chain(&d, &cfg).is_err());
    }
}
