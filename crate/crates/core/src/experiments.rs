//! Simulation generators, train/test splits, evaluation metrics, the
//! horseshoe and linear longitudinal baselines, and the benchmark driver.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::linalg::{cholesky_jittered, dot, sample_precision_form, standard_normals, RowMatrix};
use crate::model::{Dataset, Model, ModelState, Observation, VariantKind, VariantSpec};
use crate::sampler::{chain_seed, run_chain, Chain, ChainConfig};
use crate::selection::top_k_variables;
use crate::{Error, Result};

/// Unnormalized low-dimensional direction of the simulations.
pub const ETA0_RAW: [f64; 5] = [1.0, -2.0, 4.3, 10.0, -8.0];
/// Scale from months to `[0, 1]`.
pub const TIME_SCALE: f64 = 36.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Nonlinear,
    Linear,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Nonlinear => "nonlinear",
            Scenario::Linear => "linear",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear" => Ok(Scenario::Nonlinear),
            "linear" => Ok(Scenario::Linear),
            other => Err(Error::invalid(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Parameters that generated a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub scenario: Scenario,
    pub beta0: Vec<f64>,
    /// Sorted support of `beta0`.
    pub support: Vec<usize>,
    pub eta0: Vec<f64>,
    pub sigma0: f64,
    /// Region intercepts and slopes of the linear scenario.
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Truth intercept surface of region `j` (1-based) among `regions`.
pub fn truth_intercept(j: usize, regions: usize, x: f64, y: f64) -> f64 {
    let w = j as f64 / regions as f64;
    2.0 * (w * x).powi(3) + 2.0 * ((1.0 - w) * y).powi(3)
}

/// Truth slope surface of region `j` (1-based) among `regions`.
pub fn truth_slope(j: usize, regions: usize, x: f64, y: f64) -> f64 {
    let w = j as f64 / regions as f64;
    2.0 * (w * y).exp() + 2.0 * ((1.0 - w) * x).exp()
}

pub fn truth_time_warp(t: f64) -> f64 {
    t * t
}

fn visit_times(times: usize) -> Vec<f64> {
    if times == 1 {
        return vec![0.0];
    }
    (0..times).map(|s| s as f64 / (times - 1) as f64).collect()
}

/// Covariates and directions shared by both scenarios.
struct Covariates {
    x: RowMatrix,
    z: RowMatrix,
    beta0: Vec<f64>,
    support: Vec<usize>,
    eta0: Vec<f64>,
}

fn gen_covariates<R: Rng>(n: usize, p: usize, rng: &mut R) -> Covariates {
    let mut x = RowMatrix::zeros(n, p);
    for i in 0..n {
        let pi: f64 = rng.random();
        loop {
            let row = x.row_mut(i);
            let mut any = false;
            for v in row.iter_mut() {
                let on = rng.random_bool(pi);
                *v = on as u8 as f64;
                any |= on;
            }
            // all-zero rows cannot be normalized; redraw them
            if any {
                break;
            }
        }
    }
    let mut z = RowMatrix::zeros(n, ETA0_RAW.len());
    for i in 0..n {
        z.row_mut(i)
            .iter_mut()
            .for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
    }
    let s = p / 20;
    let mut support: Vec<usize> = index::sample(rng, p, s).into_vec();
    support.sort_unstable();
    let hi = Normal::new(2.0, 1.0).expect("valid normal");
    let lo = Normal::new(-1.0, 1.0).expect("valid normal");
    let mut beta0 = vec![0.0; p];
    for &c in &support {
        beta0[c] = if rng.random_bool(0.5) { hi.sample(rng) } else { lo.sample(rng) };
    }
    let beta0 = normalized(&beta0);
    Covariates {
        x,
        z,
        beta0,
        support,
        eta0: normalized(&ETA0_RAW),
    }
}

fn check_sizes(n: usize, p: usize, regions: usize, times: usize) -> Result<()> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid(format!("n must be even and at least 2, got {n}")));
    }
    if p < 40 {
        return Err(Error::invalid(format!("p must be at least 40, got {p}")));
    }
    if regions == 0 || times == 0 {
        return Err(Error::invalid("regions and time points must be positive"));
    }
    Ok(())
}

fn assemble<F>(cov: Covariates, n: usize, regions: usize, times: usize, mut mean: F, rng: &mut ChaCha8Rng) -> Result<(Dataset, Vec<f64>, Vec<f64>)>
where
    F: FnMut(f64, f64, usize, f64) -> f64,
{
    let data = Dataset::new(Vec::new(), Some(cov.x), cov.z, regions)?;
    let x = data.x().expect("covariates present");
    let u: Vec<f64> = (0..n).map(|i| dot(x.row(i), &cov.beta0)).collect();
    let v: Vec<f64> = (0..n).map(|i| dot(data.z().row(i), &cov.eta0)).collect();
    let mut obs = Vec::with_capacity(n * regions * times);
    for i in 0..n {
        for j in 0..regions {
            for &t in &visit_times(times) {
                let m = mean(u[i], v[i], j, t);
                obs.push(Observation {
                    subject: i,
                    region: j,
                    time_raw: t * TIME_SCALE,
                    time: t,
                    value: m + rng.sample::<f64, _>(StandardNormal),
                });
            }
        }
    }
    Ok((data.with_observations(obs)?, u, v))
}

/// Nonlinear scenario: cubic intercept and exponential slope surfaces with
/// a quadratic time warp.
pub fn gen_nonlinear(n: usize, p: usize, regions: usize, times: usize, seed: u64) -> Result<(Dataset, SimTruth)> {
    check_sizes(n, p, regions, times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov = gen_covariates(n, p, &mut rng);
    let (beta0, support, eta0) = (cov.beta0.clone(), cov.support.clone(), cov.eta0.clone());
    let mean = |u: f64, v: f64, j: usize, t: f64| {
        truth_intercept(j + 1, regions, u, v) - truth_slope(j + 1, regions, u, v) * truth_time_warp(t)
    };
    let (data, _, _) = assemble(cov, n, regions, times, mean, &mut rng)?;
    Ok((
        data,
        SimTruth {
            scenario: Scenario::Nonlinear,
            beta0,
            support,
            eta0,
            sigma0: 1.0,
            gamma1: Vec::new(),
            gamma2: Vec::new(),
        },
    ))
}

/// Linear scenario: `X'β + Z'η + γ_1j − (X'β + Z'η + γ_2j) t`.
pub fn gen_linear(n: usize, p: usize, regions: usize, times: usize, seed: u64) -> Result<(Dataset, SimTruth)> {
    check_sizes(n, p, regions, times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov = gen_covariates(n, p, &mut rng);
    let (beta0, support, eta0) = (cov.beta0.clone(), cov.support.clone(), cov.eta0.clone());
    let gamma1: Vec<f64> = (0..regions).map(|_| rng.sample(StandardNormal)).collect();
    let gamma2: Vec<f64> = (0..regions).map(|_| rng.sample(StandardNormal)).collect();
    let (g1, g2) = (gamma1.clone(), gamma2.clone());
    let mean = |u: f64, v: f64, j: usize, t: f64| linear_mean(u + v, g1[j], g2[j], t);
    let (data, _, _) = assemble(cov, n, regions, times, mean, &mut rng)?;
    Ok((
        data,
        SimTruth {
            scenario: Scenario::Linear,
            beta0,
            support,
            eta0,
            sigma0: 1.0,
            gamma1,
            gamma2,
        },
    ))
}

/// Mean of the linear scenario given the index `X'β + Z'η`.
pub fn linear_mean(index: f64, gamma1: f64, gamma2: f64, t: f64) -> f64 {
    index + gamma1 - (index + gamma2) * t
}

pub fn generate(scenario: Scenario, n: usize, p: usize, regions: usize, times: usize, seed: u64) -> Result<(Dataset, SimTruth)> {
    match scenario {
        Scenario::Nonlinear => gen_nonlinear(n, p, regions, times, seed),
        Scenario::Linear => gen_linear(n, p, regions, times, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Half of the subjects train, the rest test.
    Subjects,
    /// Within every subject-region pair, half of the visits test.
    Stratified,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subjects" => Ok(SplitMode::Subjects),
            "stratified" => Ok(SplitMode::Stratified),
            other => Err(Error::invalid(format!("unknown split mode '{other}'"))),
        }
    }
}

/// Splits the observations into training and test halves. Both halves
/// keep every subject's covariates.
pub fn split_half(data: &Dataset, mode: SplitMode, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = data.observations();
    let mut train = Vec::new();
    let mut test = Vec::new();
    match mode {
        SplitMode::Subjects => {
            let mut subjects: Vec<usize> = (0..data.n()).collect();
            subjects.shuffle(&mut rng);
            let mut is_train = vec![false; data.n()];
            for &s in &subjects[..data.n().div_ceil(2)] {
                is_train[s] = true;
            }
            for o in obs {
                if is_train[o.subject] {
                    train.push(*o);
                } else {
                    test.push(*o);
                }
            }
        }
        SplitMode::Stratified => {
            let mut strata: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
            for (r, o) in obs.iter().enumerate() {
                strata.entry((o.subject, o.region)).or_default().push(r);
            }
            let mut to_test = vec![false; obs.len()];
            for rows in strata.values_mut() {
                rows.shuffle(&mut rng);
                for &r in &rows[..rows.len() / 2] {
                    to_test[r] = true;
                }
            }
            for (r, o) in obs.iter().enumerate() {
                if to_test[r] {
                    test.push(*o);
                } else {
                    train.push(*o);
                }
            }
        }
    }
    Ok((data.with_observations(train)?, data.with_observations(test)?))
}

/// Mean squared difference between predictions and test outcomes.
pub fn prediction_error(predictions: &[f64], test: &Dataset) -> Result<f64> {
    if test.num_obs() == 0 {
        return Err(Error::Empty("test set has no observations".into()));
    }
    if predictions.len() != test.num_obs() {
        return Err(Error::dim("predictions", test.num_obs(), predictions.len()));
    }
    let ss: f64 = predictions
        .iter()
        .zip(test.observations())
        .map(|(p, o)| (o.value - p).powi(2))
        .sum();
    Ok(ss / test.num_obs() as f64)
}

fn orthonormal_basis(m: &RowMatrix, name: &str) -> Result<DMatrix<f64>> {
    let n = m.rows();
    let mut cols = Vec::new();
    for c in 0..m.cols() {
        let mean = (0..n).map(|i| m.get(i, c)).sum::<f64>() / n as f64;
        let centered: Vec<f64> = (0..n).map(|i| m.get(i, c) - mean).collect();
        let ss: f64 = centered.iter().map(|v| v * v).sum();
        if ss <= 1e-24 * n as f64 {
            warn!("{name}: dropping zero-variance column {c}");
            continue;
        }
        cols.push(DVector::from_vec(centered));
    }
    if cols.is_empty() {
        return Err(Error::Empty(format!("{name} has no column with variance")));
    }
    let a = DMatrix::from_columns(&cols);
    let svd = a.svd(true, false);
    let u = svd.u.expect("requested left vectors");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax)
        .collect();
    Ok(DMatrix::from_columns(&keep.iter().map(|&i| u.column(i).into_owned()).collect::<Vec<_>>()))
}

/// Largest canonical correlation between two column blocks.
pub fn max_canonical_correlation(a: &RowMatrix, b: &RowMatrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::dim("rows of the second block", a.rows(), b.rows()));
    }
    if a.cols() == 0 || b.cols() == 0 {
        return Err(Error::Empty("canonical correlation needs columns in both blocks".into()));
    }
    let ua = orthonormal_basis(a, "first block")?;
    let ub = orthonormal_basis(b, "second block")?;
    let m = ua.transpose() * ub;
    let s = m.singular_values();
    Ok(s.max().clamp(0.0, 1.0))
}

/// One draw of a linear baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDraw {
    /// High-dimensional coefficients (horseshoe only).
    pub beta: Vec<f64>,
    /// Low-dimensional coefficients: `(η, γ_1, γ_2)` for the horseshoe,
    /// `(ϱ_j0, ϱ_j1)` blocks per region for the longitudinal model.
    pub coefficients: Vec<f64>,
    pub random_effects: Vec<f64>,
    pub sigma2: f64,
    /// Global shrinkage `τ²` or random-effect variance.
    pub scale: f64,
}

/// Mean of `N(A⁻¹Φ'α, A⁻¹)`, `A = Φ'Φ + D⁻¹`, realized from the given
/// noise `u ~ N(0, D)` and `δ ~ N(0, I)` by the fast sampler for wide
/// designs: `v = Φu + δ`, `(ΦDΦ' + I) w = α − v`, `θ = u + DΦ'w`.
pub fn bhattacharya_draw(phi: &DMatrix<f64>, alpha: &DVector<f64>, d: &[f64], u: &DVector<f64>, delta: &DVector<f64>) -> Result<DVector<f64>> {
    let n = phi.nrows();
    let dm = DVector::from_column_slice(d);
    let mut phid = phi.clone();
    for (c, mut col) in phid.column_iter_mut().enumerate() {
        col *= dm[c];
    }
    let mut k = &phid * phi.transpose();
    for i in 0..n {
        k[(i, i)] += 1.0;
    }
    let v = phi * u + delta;
    let chol = cholesky_jittered(k, "fast horseshoe sampler")?;
    let w = chol.solve(&(alpha - v));
    Ok(u + phid.transpose() * w)
}

/// Draw of `β ~ N(A⁻¹Φ'α, A⁻¹)`, `A = Φ'Φ + diag(d)⁻¹`, choosing the
/// cheaper of the fast (rows < columns) and Cholesky samplers.
pub fn sample_scaled_ridge<R: Rng + ?Sized>(phi: &DMatrix<f64>, alpha: &DVector<f64>, d: &[f64], rng: &mut R) -> Result<DVector<f64>> {
    let (n, p) = phi.shape();
    if n < p {
        let u = DVector::from_fn(p, |i, _| d[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let delta = standard_normals(n, rng);
        bhattacharya_draw(phi, alpha, d, &u, &delta)
    } else {
        let mut a = phi.transpose() * phi;
        for i in 0..p {
            a[(i, i)] += 1.0 / d[i];
        }
        let chol = cholesky_jittered(a, "ridge conditional")?;
        Ok(sample_precision_form(&chol, &(phi.transpose() * alpha), rng))
    }
}

/// Closed-form mean `A⁻¹Φ'α` of the scaled ridge conditional.
pub fn ridge_mean(phi: &DMatrix<f64>, alpha: &DVector<f64>, d: &[f64]) -> Result<DVector<f64>> {
    let p = phi.ncols();
    let mut a = phi.transpose() * phi;
    for i in 0..p {
        a[(i, i)] += 1.0 / d[i];
    }
    Ok(cholesky_jittered(a, "ridge mean")?.solve(&(phi.transpose() * alpha)))
}

/// Draw from `Gamma(shape, rate)` restricted to `(0, bound)`.
fn truncated_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, bound: f64, rng: &mut R) -> f64 {
    let rate = rate.max(1e-300);
    if shape == 1.0 {
        // exponential: closed-form inverse CDF
        let cap = -(-rate * bound).exp_m1();
        let u: f64 = rng.random::<f64>() * cap;
        return (-(-u).ln_1p() / rate).min(bound);
    }
    let g = statrs::distribution::Gamma::new(shape, rate).expect("valid gamma");
    let cap = g.cdf(bound);
    if cap <= 0.0 || !cap.is_finite() {
        return bound * rng.random::<f64>().powf(1.0 / shape);
    }
    let u = rng.random::<f64>() * cap;
    g.inverse_cdf(u).clamp(f64::MIN_POSITIVE, bound)
}

/// Slice update of a half-Cauchy scale through `ξ = 1/scale²`, whose
/// conditional is `ξ^{shape−1} e^{−rate ξ} / (1 + ξ)`.
fn slice_half_cauchy<R: Rng + ?Sized>(xi: f64, shape: f64, rate: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() / (1.0 + xi);
    let bound = (1.0 - u) / u;
    truncated_gamma(shape, rate, bound, rng)
}

/// Prior variance of the diffuse normal coefficients.
pub const DIFFUSE_VARIANCE: f64 = 1e6;

/// Bayesian linear fit with a horseshoe prior on `β`:
/// `y = (X'β + Z'η)(1 − t) + γ_1j − γ_2j t + ε`.
pub fn fit_horseshoe_linear(train: &Dataset, config: &ChainConfig) -> Result<Chain<LinearDraw>> {
    config.validate()?;
    let x = train
        .x()
        .ok_or_else(|| Error::invalid("horseshoe fit needs the high-dimensional covariates"))?;
    let (n, p, k, jr) = (train.n(), train.p(), train.k(), train.regions());
    let obs = train.observations();
    if obs.is_empty() {
        return Err(Error::Empty("no training observations".into()));
    }
    let big_n = obs.len() as f64;
    let (d1, d2) = (config.variant.d1, config.variant.d2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // subjects carrying information about β
    let mut w = vec![0.0; n];
    for o in obs {
        w[o.subject] += (1.0 - o.time).powi(2);
    }
    let rows: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    // pseudo-rows √w_i X_i for the standardized coefficients β/σ
    let mut phi = x.select_rows(&rows).to_dmatrix();
    for (ri, &i) in rows.iter().enumerate() {
        let s = w[i].sqrt();
        phi.row_mut(ri).iter_mut().for_each(|v| *v *= s);
    }

    // low-dimensional block: constant Gram matrix
    let q = k + 2 * jr;
    let design = |o: &Observation| -> Vec<(usize, f64)> {
        let mut r: Vec<(usize, f64)> = (0..k).map(|c| (c, train.z().get(o.subject, c) * (1.0 - o.time))).collect();
        r.push((k + o.region, 1.0));
        r.push((k + jr + o.region, -o.time));
        r
    };
    let mut gram = DMatrix::<f64>::zeros(q, q);
    for o in obs {
        let r = design(o);
        for &(a, va) in &r {
            for &(b, vb) in &r {
                gram[(a, b)] += va * vb;
            }
        }
    }

    let mut beta = vec![0.0; p];
    let mut lam2 = vec![1.0; p];
    let mut tau2 = 1.0;
    let mut low = vec![0.0; q];
    let ybar = obs.iter().map(|o| o.value).sum::<f64>() / big_n;
    let mut sigma2 = (obs.iter().map(|o| (o.value - ybar).powi(2)).sum::<f64>() / big_n).max(1e-6);

    let mut chain = Chain {
        draws: Vec::new(),
        log_posterior: Vec::with_capacity(config.iterations),
        block_names: Vec::new(),
        acceptance: Vec::new(),
        inclusion_counts: Vec::new(),
        config_json: serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?,
    };
    for it in 0..config.iterations {
        // β | rest via subject pseudo-rows
        let mut c = vec![0.0; n];
        for o in obs {
            let zl = dot(train.z().row(o.subject), &low[..k]);
            let r = o.value - zl * (1.0 - o.time) - low[k + o.region] + low[k + jr + o.region] * o.time;
            c[o.subject] += (1.0 - o.time) * r;
        }
        let sd = sigma2.sqrt();
        let alpha = DVector::from_iterator(rows.len(), rows.iter().map(|&i| c[i] / (w[i].sqrt() * sd)));
        let dvec: Vec<f64> = lam2.iter().map(|l| tau2 * l).collect();
        let draw = sample_scaled_ridge(&phi, &alpha, &dvec, &mut rng)?;
        beta = draw.iter().map(|b| b * sd).collect();

        // (η, γ_1, γ_2) | rest
        let xb: Vec<f64> = (0..n).map(|i| dot(x.row(i), &beta)).collect();
        let mut lin = DVector::<f64>::zeros(q);
        for o in obs {
            let r = o.value - xb[o.subject] * (1.0 - o.time);
            for (a, va) in design(o) {
                lin[a] += va * r;
            }
        }
        let mut prec = &gram / sigma2;
        for a in 0..q {
            prec[(a, a)] += 1.0 / DIFFUSE_VARIANCE;
        }
        let chol = cholesky_jittered(prec, "horseshoe low-dimensional block")?;
        low = sample_precision_form(&chol, &(lin / sigma2), &mut rng).as_slice().to_vec();

        // scales
        for s in 0..p {
            let m = beta[s] * beta[s] / (2.0 * sigma2 * tau2);
            lam2[s] = 1.0 / slice_half_cauchy(1.0 / lam2[s], 1.0, m, &mut rng);
            lam2[s] = lam2[s].clamp(1e-300, 1e300);
        }
        let m: f64 = beta.iter().zip(&lam2).map(|(b, l)| b * b / (2.0 * sigma2 * l)).sum();
        tau2 = (1.0 / slice_half_cauchy(1.0 / tau2, (p as f64 + 1.0) / 2.0, m, &mut rng)).clamp(1e-300, 1e300);

        // σ² | rest
        let mut rss = 0.0;
        for o in obs {
            let f = horseshoe_mean(xb[o.subject], train.z().row(o.subject), &low, k, jr, o);
            rss += (o.value - f).powi(2);
        }
        let pen: f64 = beta.iter().zip(&lam2).map(|(b, l)| b * b / (tau2 * l)).sum();
        let shape = d1 + big_n / 2.0 + p as f64 / 2.0;
        let rate = d2 + rss / 2.0 + pen / 2.0;
        sigma2 = 1.0 / Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(&mut rng);

        let ll = -0.5 * big_n * (2.0 * PI * sigma2).ln() - rss / (2.0 * sigma2);
        chain.log_posterior.push(ll);
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            chain.draws.push(LinearDraw {
                beta: beta.clone(),
                coefficients: low.clone(),
                random_effects: Vec::new(),
                sigma2,
                scale: tau2,
            });
        }
    }
    Ok(chain)
}

fn horseshoe_mean(xb: f64, z: &[f64], low: &[f64], k: usize, jr: usize, o: &Observation) -> f64 {
    (xb + dot(z, &low[..k])) * (1.0 - o.time) + low[k + o.region] - low[k + jr + o.region] * o.time
}

/// Mean of a linear draw's coefficients.
pub fn mean_draw(chain: &Chain<LinearDraw>) -> Result<LinearDraw> {
    let first = chain.draws.first().ok_or_else(|| Error::Empty("chain has no draws".into()))?;
    let n = chain.draws.len() as f64;
    let avg = |f: &dyn Fn(&LinearDraw) -> &Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; f(first).len()];
        for d in &chain.draws {
            acc.iter_mut().zip(f(d)).for_each(|(a, v)| *a += v);
        }
        acc.into_iter().map(|v| v / n).collect()
    };
    Ok(LinearDraw {
        beta: avg(&|d| &d.beta),
        coefficients: avg(&|d| &d.coefficients),
        random_effects: avg(&|d| &d.random_effects),
        sigma2: chain.draws.iter().map(|d| d.sigma2).sum::<f64>() / n,
        scale: chain.draws.iter().map(|d| d.scale).sum::<f64>() / n,
    })
}

/// Posterior-mean predictions of the horseshoe fit.
pub fn predict_horseshoe(chain: &Chain<LinearDraw>, data: &Dataset) -> Result<Vec<f64>> {
    let m = mean_draw(chain)?;
    let x = data.x().ok_or_else(|| Error::invalid("prediction needs the high-dimensional covariates"))?;
    let (k, jr) = (data.k(), data.regions());
    if m.coefficients.len() != k + 2 * jr || m.beta.len() != data.p() {
        return Err(Error::dim("horseshoe coefficients", k + 2 * jr, m.coefficients.len()));
    }
    Ok(data
        .observations()
        .iter()
        .map(|o| horseshoe_mean(dot(x.row(o.subject), &m.beta), data.z().row(o.subject), &m.coefficients, k, jr, o))
        .collect())
}

/// Covariate structure of the linear longitudinal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDesign {
    /// Include every column of `Z` as a main effect.
    pub main_effects: bool,
    /// Pairs of `Z` columns entering as products.
    pub interactions: Vec<(usize, usize)>,
    /// Fixed random-effect variance; sampled under `IG(1, 1)` when absent.
    pub random_effect_variance: Option<f64>,
}

impl Default for LongitudinalDesign {
    fn default() -> Self {
        LongitudinalDesign {
            main_effects: true,
            interactions: Vec::new(),
            random_effect_variance: None,
        }
    }
}

impl LongitudinalDesign {
    /// Subject features `[1, Z main effects, products]`.
    pub fn features(&self, z: &[f64]) -> Vec<f64> {
        let mut f = vec![1.0];
        if self.main_effects {
            f.extend_from_slice(z);
        }
        f.extend(self.interactions.iter().map(|&(a, b)| z[a] * z[b]));
        f
    }

    fn width(&self, k: usize) -> usize {
        1 + if self.main_effects { k } else { 0 } + self.interactions.len()
    }
}

/// Per-region coefficients `(ϱ_j0, ϱ_j1)` and their mean
/// `ϱ_j0'f − (ϱ_j1'f) t`.
fn longitudinal_mean(features: &[f64], coef: &[f64], t: f64) -> f64 {
    let w = features.len();
    dot(features, &coef[..w]) - dot(features, &coef[w..2 * w]) * t
}

/// Conditional mean of region `j`'s coefficients given effects and `σ²`.
pub fn longitudinal_conditional_mean(
    train: &Dataset,
    design: &LongitudinalDesign,
    random_effects: &[f64],
    sigma2: f64,
    j: usize,
) -> Result<DVector<f64>> {
    let (prec, lin) = longitudinal_normal_equations(train, design, random_effects, sigma2, j)?;
    Ok(cholesky_jittered(prec, "longitudinal coefficients")?.solve(&lin))
}

fn longitudinal_normal_equations(
    train: &Dataset,
    design: &LongitudinalDesign,
    random_effects: &[f64],
    sigma2: f64,
    j: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let w = design.width(train.k());
    let mut prec = DMatrix::<f64>::zeros(2 * w, 2 * w);
    let mut lin = DVector::<f64>::zeros(2 * w);
    for o in train.observations().iter().filter(|o| o.region == j) {
        let f = design.features(train.z().row(o.subject));
        let row: Vec<f64> = f.iter().copied().chain(f.iter().map(|v| -v * o.time)).collect();
        let r = o.value - random_effects.get(o.subject).copied().unwrap_or(0.0);
        for a in 0..2 * w {
            lin[a] += row[a] * r / sigma2;
            for b in 0..2 * w {
                prec[(a, b)] += row[a] * row[b] / sigma2;
            }
        }
    }
    for a in 0..2 * w {
        prec[(a, a)] += 1.0 / DIFFUSE_VARIANCE;
    }
    Ok((prec, lin))
}

/// Conjugate Gibbs fit of the linear longitudinal model with subject
/// random intercepts.
pub fn fit_linear_longitudinal(train: &Dataset, design: &LongitudinalDesign, config: &ChainConfig) -> Result<Chain<LinearDraw>> {
    config.validate()?;
    let obs = train.observations();
    if obs.is_empty() {
        return Err(Error::Empty("no training observations".into()));
    }
    for &(a, b) in &design.interactions {
        if a >= train.k() || b >= train.k() {
            return Err(Error::invalid(format!("interaction ({a}, {b}) outside the {} covariates", train.k())));
        }
    }
    let (n, jr) = (train.n(), train.regions());
    let w = design.width(train.k());
    let feats: Vec<Vec<f64>> = (0..n).map(|i| design.features(train.z().row(i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut coef = vec![0.0; 2 * w * jr];
    let mut tau = vec![0.0; n];
    let mut tau_var = design.random_effect_variance.unwrap_or(1.0);
    let big_n = obs.len() as f64;
    let ybar = obs.iter().map(|o| o.value).sum::<f64>() / big_n;
    let mut sigma2 = (obs.iter().map(|o| (o.value - ybar).powi(2)).sum::<f64>() / big_n).max(1e-6);
    let (d1, d2) = (config.variant.d1, config.variant.d2);
    let mut counts = vec![0usize; n];
    for o in obs {
        counts[o.subject] += 1;
    }
    let mut chain = Chain {
        draws: Vec::new(),
        log_posterior: Vec::with_capacity(config.iterations),
        block_names: Vec::new(),
        acceptance: Vec::new(),
        inclusion_counts: Vec::new(),
        config_json: serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?,
    };
    for it in 0..config.iterations {
        for j in 0..jr {
            let (prec, lin) = longitudinal_normal_equations(train, design, &tau, sigma2, j)?;
            let chol = cholesky_jittered(prec, "longitudinal coefficients")?;
            let draw = sample_precision_form(&chol, &lin, &mut rng);
            coef[j * 2 * w..(j + 1) * 2 * w].copy_from_slice(draw.as_slice());
        }
        let mut sums = vec![0.0; n];
        for o in obs {
            let c = &coef[o.region * 2 * w..(o.region + 1) * 2 * w];
            sums[o.subject] += o.value - longitudinal_mean(&feats[o.subject], c, o.time);
        }
        for i in 0..n {
            let prec = counts[i] as f64 / sigma2 + 1.0 / tau_var;
            let var = 1.0 / prec;
            tau[i] = var * sums[i] / sigma2 + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        if design.random_effect_variance.is_none() {
            let ss: f64 = tau.iter().map(|t| t * t).sum();
            tau_var = 1.0 / Gamma::new(1.0 + n as f64 / 2.0, 1.0 / (1.0 + ss / 2.0)).expect("valid gamma").sample(&mut rng);
        }
        let mut rss = 0.0;
        for o in obs {
            let c = &coef[o.region * 2 * w..(o.region + 1) * 2 * w];
            rss += (o.value - longitudinal_mean(&feats[o.subject], c, o.time) - tau[o.subject]).powi(2);
        }
        sigma2 = 1.0 / Gamma::new(d1 + big_n / 2.0, 1.0 / (d2 + rss / 2.0)).expect("valid gamma").sample(&mut rng);
        chain.log_posterior.push(-0.5 * big_n * (2.0 * PI * sigma2).ln() - rss / (2.0 * sigma2));
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            chain.draws.push(LinearDraw {
                beta: Vec::new(),
                coefficients: coef.clone(),
                random_effects: tau.clone(),
                sigma2,
                scale: tau_var,
            });
        }
    }
    Ok(chain)
}

/// Posterior-mean predictions of the linear longitudinal fit.
pub fn predict_linear_longitudinal(chain: &Chain<LinearDraw>, design: &LongitudinalDesign, data: &Dataset) -> Result<Vec<f64>> {
    let m = mean_draw(chain)?;
    let w = design.width(data.k());
    if m.coefficients.len() != 2 * w * data.regions() {
        return Err(Error::dim("longitudinal coefficients", 2 * w * data.regions(), m.coefficients.len()));
    }
    if m.random_effects.len() != data.n() {
        return Err(Error::dim("random effects", data.n(), m.random_effects.len()));
    }
    Ok(data
        .observations()
        .iter()
        .map(|o| {
            let f = design.features(data.z().row(o.subject));
            let c = &m.coefficients[o.region * 2 * w..(o.region + 1) * 2 * w];
            longitudinal_mean(&f, c, o.time) + m.random_effects[o.subject]
        })
        .collect())
}

/// Posterior-mean predictions of a single-index chain at `data`'s
/// observations. Random effects are those of the training subjects.
pub fn predict_sim(chain: &Chain<ModelState>, spec: &VariantSpec, data: &Dataset) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::Empty("chain has no draws".into()));
    }
    let model = Model::new(data, spec.clone())?;
    let mut acc = vec![0.0; data.num_obs()];
    for d in &chain.draws {
        let v = model.fitted_values(d)?;
        acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
    }
    let n = chain.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Basis size used for `n` subjects: 8 at 200, 11 at 500, 14 at 1000, the
/// nearest schedule entry otherwise.
pub fn basis_schedule(n: usize) -> usize {
    const SCHEDULE: [(usize, usize); 3] = [(200, 8), (500, 11), (1000, 14)];
    SCHEDULE
        .iter()
        .min_by_key(|(m, _)| (*m as i64 - n as i64).unsigned_abs())
        .map(|&(_, k)| k)
        .expect("non-empty schedule")
}

/// Settings of a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub regions: usize,
    pub times: usize,
    pub replications: usize,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    /// Overrides the basis schedule.
    pub basis_k: Option<usize>,
    pub initial_q: f64,
    pub size_window: (usize, usize),
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub m1: f64,
    pub m2: f64,
    pub parallel: bool,
}

impl BenchmarkConfig {
    pub fn new(scenario: Scenario, n: usize, p: usize, replications: usize, seed: u64) -> Self {
        BenchmarkConfig {
            scenario,
            n,
            p,
            regions: 13,
            times: 5,
            replications,
            seed,
            iterations: 1500,
            burn_in: 500,
            basis_k: None,
            initial_q: 0.05,
            size_window: (20, 30),
            step_size: 0.01,
            leapfrog_steps: 20,
            m1: 0.1,
            m2: 10.0,
            parallel: true,
        }
    }
}

/// Result of one method on one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub replication: usize,
    pub method: String,
    pub mse: f64,
    pub canonical_correlation: f64,
    /// Fraction of the true support among the top-`|I0|` coordinates.
    pub support_overlap: f64,
    pub error: Option<String>,
}

/// Method averages in the table layout `n, p, method, MSE, max canonical
/// correlation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub p: usize,
    pub method: String,
    pub mse: f64,
    pub canonical_correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: BenchmarkConfig,
    pub rows: Vec<EvalRow>,
}

pub const METHOD_SIM: &str = "single_index";
pub const METHOD_HORSESHOE: &str = "horseshoe_linear";

impl EvalReport {
    pub fn method_rows(&self, method: &str) -> Vec<&EvalRow> {
        self.rows.iter().filter(|r| r.method == method && r.error.is_none()).collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        [METHOD_SIM, METHOD_HORSESHOE]
            .iter()
            .map(|m| {
                let rows = self.method_rows(m);
                let k = rows.len().max(1) as f64;
                SummaryRow {
                    n: self.config.n,
                    p: self.config.p,
                    method: m.to_string(),
                    mse: rows.iter().map(|r| r.mse).sum::<f64>() / k,
                    canonical_correlation: rows.iter().map(|r| r.canonical_correlation).sum::<f64>() / k,
                }
            })
            .collect()
    }
}

fn overlap(selected: &[usize], support: &[usize]) -> f64 {
    if support.is_empty() {
        return 0.0;
    }
    selected.iter().filter(|s| support.contains(s)).count() as f64 / support.len() as f64
}

fn selection_rows(data: &Dataset, truth: &SimTruth, selected: &[usize], replication: usize, method: &str, mse: f64) -> Result<EvalRow> {
    let x = data.x().expect("simulated covariates");
    let cc = max_canonical_correlation(&x.select_columns(selected), &x.select_columns(&truth.support))?;
    Ok(EvalRow {
        replication,
        method: method.to_string(),
        mse,
        canonical_correlation: cc,
        support_overlap: overlap(selected, &truth.support),
        error: None,
    })
}

fn failed(replication: usize, method: &str, e: &Error) -> EvalRow {
    EvalRow {
        replication,
        method: method.to_string(),
        mse: f64::NAN,
        canonical_correlation: f64::NAN,
        support_overlap: f64::NAN,
        error: Some(e.to_string()),
    }
}

/// Spec and chain settings of the single-index fit in a benchmark.
pub fn benchmark_chain_config(cfg: &BenchmarkConfig, seed: u64) -> Result<ChainConfig> {
    let k = cfg.basis_k.unwrap_or_else(|| basis_schedule(cfg.n));
    let mut spec = VariantSpec::new(VariantKind::Base, k, k);
    spec.spike = crate::priors::SpikeSlabConfig::new(cfg.m1, cfg.m2, cfg.initial_q)?;
    let mut chain = ChainConfig::new(spec, cfg.iterations, cfg.burn_in, seed);
    chain.adapt_q_target = cfg.size_window;
    chain.hmc.step_size = cfg.step_size;
    chain.hmc.leapfrog_steps = cfg.leapfrog_steps;
    Ok(chain)
}

fn run_replication(cfg: &BenchmarkConfig, r: usize) -> Vec<EvalRow> {
    let seed = chain_seed(cfg.seed, r);
    let setup = || -> Result<(Dataset, SimTruth, Dataset, Dataset)> {
        let (data, truth) = generate(cfg.scenario, cfg.n, cfg.p, cfg.regions, cfg.times, seed)?;
        let (train, test) = split_half(&data, SplitMode::Subjects, seed ^ 0x5157)?;
        Ok((data, truth, train, test))
    };
    let (data, truth, train, test) = match setup() {
        Ok(v) => v,
        Err(e) => return vec![failed(r, METHOD_SIM, &e), failed(r, METHOD_HORSESHOE, &e)],
    };
    let k = truth.support.len();
    let sim = || -> Result<EvalRow> {
        let cc = benchmark_chain_config(cfg, seed.wrapping_add(1))?;
        let chain = run_chain(&train, &cc)?;
        let pred = predict_sim(&chain, &cc.variant, &test)?;
        let mse = prediction_error(&pred, &test)?;
        let selected = top_k_variables(&chain, k)?;
        selection_rows(&data, &truth, &selected, r, METHOD_SIM, mse)
    };
    let hs = || -> Result<EvalRow> {
        let mut cc = benchmark_chain_config(cfg, seed.wrapping_add(2))?;
        cc.adapt_q = false;
        let chain = fit_horseshoe_linear(&train, &cc)?;
        let pred = predict_horseshoe(&chain, &test)?;
        let mse = prediction_error(&pred, &test)?;
        let m = mean_draw(&chain)?;
        let mags: Vec<f64> = m.beta.iter().map(|b| b.abs()).collect();
        let selected = crate::selection::top_k_by(&mags, &mags, k);
        selection_rows(&data, &truth, &selected, r, METHOD_HORSESHOE, mse)
    };
    let rows = vec![
        sim().unwrap_or_else(|e| failed(r, METHOD_SIM, &e)),
        hs().unwrap_or_else(|e| failed(r, METHOD_HORSESHOE, &e)),
    ];
    for row in &rows {
        info!(
            "replication {r} {}: mse {:.4}, canonical correlation {:.4}, overlap {:.3}{}",
            row.method,
            row.mse,
            row.canonical_correlation,
            row.support_overlap,
            row.error.as_deref().map(|e| format!(" (failed: {e})")).unwrap_or_default()
        );
    }
    rows
}

/// Generates, splits, fits and evaluates every replication.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<EvalReport> {
    if cfg.replications == 0 {
        return Err(Error::invalid("replications must be at least 1"));
    }
    check_sizes(cfg.n, cfg.p, cfg.regions, cfg.times)?;
    let rows: Vec<Vec<EvalRow>> = if cfg.parallel {
        (0..cfg.replications).into_par_iter().map(|r| run_replication(cfg, r)).collect()
    } else {
        (0..cfg.replications).map(|r| run_replication(cfg, r)).collect()
    };
    Ok(EvalReport {
        config: cfg.clone(),
        rows: rows.into_iter().flatten().collect(),
    })
}
