//! Priors: spike-and-slab angles, coefficient normals, DP scale mixture.
//!
//! Interior angles `θ_r` (`r ≤ p−2`) mix a uniform slab on `(0, π)` with a
//! spike whose kernel, in terms of `x = min(θ, π−θ)/(π/2)`, is
//! `x^{M2} (1−x)^{M1}`. With `M1 < 1 ≤ M2` the mass piles up just short of
//! `π/2` while the density itself vanishes at `π/2`. The kernel is
//! normalized by its exact integral `π · B(M2+1, M1+1)`.
//!
//! The last angle lives on `[0, 2π]`; its spike is an equal-weight mixture of
//! eight beta densities on consecutive quarter-π intervals with alternating
//! shapes, giving (integrable) poles at every multiple of `π/2`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::polar::PolarAngles;
use crate::splines::SurfaceCoefficients;
use crate::{Error, Result};

/// Nudge applied to an angle sitting exactly on a kink before taking a
/// one-sided derivative.
const KINK_NUDGE: f64 = 1e-12;

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabConfig {
    m1: f64,
    m2: f64,
    q: f64,
    spike_log_norm: f64,
}

impl SpikeSlabConfig {
    pub fn new(m1: f64, m2: f64, q: f64) -> Result<Self> {
        if !(m1 > 0.0 && m1 < 1.0) {
            return Err(Error::invalid(format!("M1 must lie in (0, 1), got {m1}")));
        }
        if !(m2 >= 1.0 && m2.is_finite()) {
            return Err(Error::invalid(format!("M2 must be at least 1, got {m2}")));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::invalid(format!("slab probability must lie in (0, 1), got {q}")));
        }
        Ok(SpikeSlabConfig {
            m1,
            m2,
            q,
            spike_log_norm: PI.ln() + ln_beta(m2 + 1.0, m1 + 1.0),
        })
    }

    /// `M2 = √(np) log p` with slab probability `1/p`, the scaling under
    /// which the spike concentrates fast enough for consistency.
    pub fn theory_guided(n: usize, p: usize, m1: f64) -> Result<Self> {
        let pf = p as f64;
        let m2 = ((n as f64) * pf).sqrt() * pf.ln();
        Self::new(m1, m2.max(1.0), (1.0 / pf).clamp(1e-12, 0.5))
    }

    pub fn m1(&self) -> f64 {
        self.m1
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn set_q(&mut self, q: f64) {
        self.q = q.clamp(1e-12, 1.0 - 1e-12);
    }

    /// Log of `∫_0^π x^{M2}(1−x)^{M1} dθ`.
    pub fn spike_log_norm(&self) -> f64 {
        self.spike_log_norm
    }

    /// Location of the interior spike's mode below `π/2`.
    pub fn spike_mode(&self) -> f64 {
        FRAC_PI_2 * self.m2 / (self.m1 + self.m2)
    }
}

impl Default for SpikeSlabConfig {
    fn default() -> Self {
        SpikeSlabConfig::new(0.1, 10.0, 0.05).expect("default spike-and-slab settings are valid")
    }
}

/// Log density of the interior-angle spike.
pub fn log_spike_density(theta_r: f64, cfg: &SpikeSlabConfig) -> f64 {
    if !(theta_r > 0.0 && theta_r < PI) {
        return f64::NEG_INFINITY;
    }
    let x = theta_r.min(PI - theta_r) / FRAC_PI_2;
    if x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    cfg.m2 * x.ln() + cfg.m1 * (1.0 - x).ln() - cfg.spike_log_norm
}

fn spike_grad(theta_r: f64, cfg: &SpikeSlabConfig) -> f64 {
    let theta = if theta_r == FRAC_PI_2 {
        theta_r + KINK_NUDGE
    } else {
        theta_r
    };
    let (x, dx) = if theta < FRAC_PI_2 {
        (theta / FRAC_PI_2, 1.0 / FRAC_PI_2)
    } else {
        ((PI - theta) / FRAC_PI_2, -1.0 / FRAC_PI_2)
    };
    if x <= 0.0 {
        return 0.0;
    }
    (cfg.m2 / x - cfg.m1 / (1.0 - x)) * dx
}

/// Piece index, position within the piece and its complement for the last
/// angle's spike.
fn last_piece(theta: f64) -> (usize, f64, f64) {
    let k = ((theta / FRAC_PI_4).floor() as isize).clamp(0, 7) as usize;
    let y = ((theta - k as f64 * FRAC_PI_4) / FRAC_PI_4).clamp(0.0, 1.0);
    let omy = (((k + 1) as f64 * FRAC_PI_4 - theta) / FRAC_PI_4).clamp(0.0, 1.0);
    (k, y, omy)
}

fn piece_shapes(k: usize, cfg: &SpikeSlabConfig) -> (f64, f64) {
    if k % 2 == 0 {
        (cfg.m1, cfg.m2)
    } else {
        (cfg.m2, cfg.m1)
    }
}

/// Log density of the last angle's spike in piece-local coordinates:
/// `θ = (k + y)·π/4`, with `omy = 1 − y` supplied separately so that
/// callers can keep full precision near either end of the piece.
pub fn last_piece_log_density(k: usize, y: f64, omy: f64, cfg: &SpikeSlabConfig) -> f64 {
    let (a, b) = piece_shapes(k, cfg);
    let kernel = |exp: f64, z: f64| if exp == 0.0 { 0.0 } else { exp * z.ln() };
    -(8.0f64).ln() - FRAC_PI_4.ln() + kernel(a - 1.0, y) + kernel(b - 1.0, omy) - ln_beta(a, b)
}

/// Log density of the last angle's eight-piece spike on `[0, 2π]`.
pub fn log_last_angle_density(theta_last: f64, cfg: &SpikeSlabConfig) -> f64 {
    if !(0.0..=2.0 * PI).contains(&theta_last) {
        return f64::NEG_INFINITY;
    }
    let (k, y, omy) = last_piece(theta_last);
    last_piece_log_density(k, y, omy, cfg)
}

fn last_angle_grad(theta: f64, cfg: &SpikeSlabConfig) -> f64 {
    let on_kink = (theta / FRAC_PI_4).fract() == 0.0;
    let theta = if on_kink { theta + KINK_NUDGE } else { theta };
    let (k, y, omy) = last_piece(theta.min(2.0 * PI - KINK_NUDGE));
    if y <= 0.0 || omy <= 0.0 {
        return 0.0;
    }
    let (a, b) = piece_shapes(k, cfg);
    ((a - 1.0) / y - (b - 1.0) / omy) / FRAC_PI_4
}

/// Draw from the interior spike: `x ~ Be(M2+1, M1+1)` on either half.
pub fn sample_spike<R: Rng + ?Sized>(cfg: &SpikeSlabConfig, rng: &mut R) -> f64 {
    let x = Beta::new(cfg.m2 + 1.0, cfg.m1 + 1.0)
        .expect("valid beta")
        .sample(rng)
        .clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    if rng.random_bool(0.5) {
        x * FRAC_PI_2
    } else {
        PI - x * FRAC_PI_2
    }
}

/// Draw from the last angle's spike: a uniformly chosen piece, then a beta
/// position within it.
pub fn sample_last_spike<R: Rng + ?Sized>(cfg: &SpikeSlabConfig, rng: &mut R) -> f64 {
    let k = rng.random_range(0..8usize);
    let (a, b) = piece_shapes(k, cfg);
    let y = Beta::new(a, b).expect("valid beta").sample(rng);
    ((k as f64 + y) * FRAC_PI_4).clamp(1e-300, 2.0 * PI)
}

/// Inclusion indicators, one per angle (`1` = slab).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionIndicators {
    gamma: Vec<bool>,
}

impl InclusionIndicators {
    pub fn new(gamma: Vec<bool>) -> Self {
        InclusionIndicators { gamma }
    }

    pub fn all(len: usize, value: bool) -> Self {
        InclusionIndicators {
            gamma: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.gamma
    }

    pub fn set(&mut self, r: usize, v: bool) {
        self.gamma[r] = v;
    }

    pub fn model_size(&self) -> usize {
        self.gamma.iter().filter(|&&g| g).count()
    }
}

/// Spike and slab log densities of a single angle.
fn spike_and_slab_logs(theta: f64, is_last: bool, cfg: &SpikeSlabConfig) -> (f64, f64) {
    if is_last {
        (log_last_angle_density(theta, cfg), -(2.0 * PI).ln())
    } else {
        (log_spike_density(theta, cfg), -PI.ln())
    }
}

/// Conditional log prior of the angles given the indicators, with gradient.
pub fn log_angle_prior(
    theta: &PolarAngles,
    gamma: &InclusionIndicators,
    cfg: &SpikeSlabConfig,
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != gamma.len() {
        return Err(Error::dim("inclusion indicators", theta.len(), gamma.len()));
    }
    let mut grad = vec![0.0; theta.len()];
    let value = log_angle_prior_into(theta.as_slice(), gamma.as_slice(), cfg, &mut grad);
    Ok((value, grad))
}

pub(crate) fn log_angle_prior_into(
    angles: &[f64],
    gamma: &[bool],
    cfg: &SpikeSlabConfig,
    grad: &mut [f64],
) -> f64 {
    let n = angles.len();
    let mut total = 0.0;
    for r in 0..n {
        let is_last = r + 1 == n;
        let th = angles[r];
        if gamma[r] {
            total += if is_last { -(2.0 * PI).ln() } else { -PI.ln() };
            grad[r] = 0.0;
        } else if is_last {
            total += log_last_angle_density(th, cfg);
            grad[r] = last_angle_grad(th, cfg);
        } else {
            total += log_spike_density(th, cfg);
            grad[r] = spike_grad(th, cfg);
        }
    }
    total
}

/// Posterior probability that angle `theta_r` came from the slab.
pub fn inclusion_probability(theta_r: f64, is_last: bool, cfg: &SpikeSlabConfig) -> f64 {
    let (log_spike, log_slab) = spike_and_slab_logs(theta_r, is_last, cfg);
    if log_spike == f64::NEG_INFINITY {
        return 1.0;
    }
    if log_spike == f64::INFINITY {
        return 0.0;
    }
    let a = cfg.q.ln() + log_slab;
    let b = (1.0 - cfg.q).ln() + log_spike;
    1.0 / (1.0 + (b - a).exp())
}

/// Draws `γ_r` from its exact two-component conditional.
pub fn gibbs_indicator<R: Rng + ?Sized>(
    theta_r: f64,
    is_last: bool,
    cfg: &SpikeSlabConfig,
    rng: &mut R,
) -> bool {
    let prob = inclusion_probability(theta_r, is_last, cfg);
    rng.random::<f64>() < prob
}

/// Independent `N(0, a²)` log density over the free surface coefficients.
pub fn log_coeff_prior(coeffs: &SurfaceCoefficients, a: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("coefficient prior scale must be positive, got {a}")));
    }
    let c = -0.5 * (2.0 * PI * a * a).ln();
    Ok(coeffs
        .free()
        .iter()
        .map(|l| c - l * l / (2.0 * a * a))
        .sum())
}

/// Base measure and concentration of the random-effect DP mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpHyper {
    pub concentration: f64,
    /// Inverse-gamma shape of component variances.
    pub scale_shape: f64,
    /// Inverse-gamma scale of component variances.
    pub scale_rate: f64,
    pub truncation: usize,
}

impl Default for DpHyper {
    fn default() -> Self {
        DpHyper {
            concentration: 1.0,
            scale_shape: 2.0,
            scale_rate: 0.5,
            truncation: 20,
        }
    }
}

/// Truncated stick-breaking mixture of centered normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DPMixtureState {
    pub hyper: DpHyper,
    /// Stick fractions `V_h`; the last is fixed at 1.
    pub sticks: Vec<f64>,
    pub weights: Vec<f64>,
    /// Component variances.
    pub scales: Vec<f64>,
    pub assignments: Vec<usize>,
}

fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

fn weights_from_sticks(sticks: &[f64]) -> Vec<f64> {
    let mut rest = 1.0;
    sticks
        .iter()
        .map(|&v| {
            let w = v * rest;
            rest *= 1.0 - v;
            w
        })
        .collect()
}

impl DPMixtureState {
    /// Draws sticks, scales and `n` assignments from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(hyper: DpHyper, n: usize, rng: &mut R) -> Result<Self> {
        if hyper.truncation < 1 {
            return Err(Error::invalid("DP truncation must be at least 1"));
        }
        if !(hyper.concentration > 0.0 && hyper.scale_shape > 0.0 && hyper.scale_rate > 0.0) {
            return Err(Error::invalid("DP hyperparameters must be positive"));
        }
        let h = hyper.truncation;
        let beta = Beta::new(1.0, hyper.concentration).expect("valid beta");
        let mut sticks: Vec<f64> = (0..h).map(|_| beta.sample(rng)).collect();
        sticks[h - 1] = 1.0;
        let weights = weights_from_sticks(&sticks);
        let scales = (0..h)
            .map(|_| sample_inv_gamma(hyper.scale_shape, hyper.scale_rate, rng))
            .collect();
        let assignments = (0..n).map(|_| sample_categorical(&weights, rng)).collect();
        Ok(DPMixtureState {
            hyper,
            sticks,
            weights,
            scales,
            assignments,
        })
    }

    /// Variance of the component subject `i` is assigned to.
    pub fn variance_of(&self, i: usize) -> f64 {
        self.scales[self.assignments[i]]
    }

    /// Posterior assignment probabilities of one effect value.
    pub fn assignment_probabilities(&self, effect: f64) -> Vec<f64> {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.scales)
            .map(|(&w, &s)| w.ln() - 0.5 * (2.0 * PI * s).ln() - effect * effect / (2.0 * s))
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let tot: f64 = ex.iter().sum();
        ex.into_iter().map(|e| e / tot).collect()
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (h, &p) in probs.iter().enumerate() {
        if u < p {
            return h;
        }
        u -= p;
    }
    probs.len() - 1
}

/// One blocked-Gibbs sweep of the truncated DP mixture given the effects:
/// assignments, then sticks, then component variances.
pub fn dp_update<R: Rng + ?Sized>(
    effects: &[f64],
    state: &DPMixtureState,
    rng: &mut R,
) -> DPMixtureState {
    if effects.is_empty() {
        return state.clone();
    }
    let mut next = state.clone();
    let h = state.hyper.truncation;
    next.assignments = effects
        .iter()
        .map(|&e| sample_categorical(&state.assignment_probabilities(e), rng))
        .collect();

    let mut counts = vec![0usize; h];
    let mut sums = vec![0.0; h];
    for (&z, &e) in next.assignments.iter().zip(effects) {
        counts[z] += 1;
        sums[z] += e * e;
    }
    let mut beyond = effects.len();
    for k in 0..h {
        beyond -= counts[k];
        if k + 1 == h {
            next.sticks[k] = 1.0;
        } else {
            let beta = Beta::new(
                1.0 + counts[k] as f64,
                state.hyper.concentration + beyond as f64,
            )
            .expect("valid beta");
            next.sticks[k] = beta.sample(rng);
        }
    }
    next.weights = weights_from_sticks(&next.sticks);
    for k in 0..h {
        next.scales[k] = sample_inv_gamma(
            state.hyper.scale_shape + counts[k] as f64 / 2.0,
            state.hyper.scale_rate + sums[k] / 2.0,
            rng,
        );
    }
    next
}
