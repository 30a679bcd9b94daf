//! Basis-size selection by BIC and posterior variable selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Dataset, Model, ModelState, VariantKind, VariantSpec};
use crate::polar::unit_to_polar;
use crate::sampler::{chain_seed, Chain};
use crate::splines::MonotoneTimeFn;
use crate::{Error, Result};

/// Exponents of the coarse time-warp grid `λ_l = ((l−1)/(K′−1))^κ`.
pub const WARP_EXPONENTS: [f64; 6] = [0.5, 0.75, 1.0, 1.5, 2.0, 3.0];

/// Prior scale used to make the conditional surface fit a least-squares fit.
const DIFFUSE_SCALE: f64 = 1e6;

/// One BIC evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicRecord {
    pub k: usize,
    pub k_prime: usize,
    pub replicate: usize,
    pub bic: f64,
    pub params: usize,
    pub n_obs: usize,
}

/// BIC averaged over random directions, one row per grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub k_prime: usize,
    pub mean_bic: f64,
    pub params: usize,
    pub n_obs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicSelection {
    pub k: usize,
    pub k_prime: usize,
    /// Rows of the `K` pass (with `K′ = K`).
    pub k_table: Vec<BicRow>,
    /// Rows of the nested `K′` pass at the selected `K`.
    pub k_prime_table: Vec<BicRow>,
    pub records: Vec<BicRecord>,
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Increments whose normalized cumulative sums are `((l−1)/(K′−1))^κ`.
pub fn warp_deltas(k_prime: usize, kappa: f64) -> Vec<f64> {
    let lam: Vec<f64> = (0..k_prime)
        .map(|l| (l as f64 / (k_prime - 1) as f64).powf(kappa))
        .collect();
    let diffs: Vec<f64> = lam.windows(2).map(|w| w[1] - w[0]).collect();
    let mx = diffs.iter().cloned().fold(0.0, f64::max);
    diffs.into_iter().map(|d| (0.5 * d / mx).clamp(1e-9, 1.0 - 1e-9)).collect()
}

/// Directions used by one BIC replicate.
struct Directions {
    beta: Option<Vec<f64>>,
    etas: Vec<Vec<f64>>,
}

/// Maximized conditional log likelihood and parameter count for given
/// directions: surfaces by least squares, the warp by a coarse search over
/// `WARP_EXPONENTS`, and `σ² = RSS/N`.
fn conditional_fit(data: &Dataset, kind: VariantKind, k: usize, k_prime: usize, dirs: &Directions) -> Result<(f64, usize)> {
    let mut spec = VariantSpec::new(kind, k, k_prime);
    spec.a = DIFFUSE_SCALE;
    let model = Model::new(data, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = model.initial_state(&mut rng)?;
    if let Some(b) = &dirs.beta {
        state.theta = Some(unit_to_polar(b)?);
    }
    for (a, eta) in state.alpha.iter_mut().zip(&dirs.etas) {
        *a = unit_to_polar(eta)?;
    }
    state.random_effects.iter_mut().for_each(|t| *t = 0.0);
    state.sigma2 = 1.0;
    let mut best = f64::INFINITY;
    for &kappa in &WARP_EXPONENTS {
        state.timefn = MonotoneTimeFn::new(warp_deltas(k_prime, kappa))?;
        for j in 0..data.regions() {
            let (mean, _) = model.surface_conditional(&state, j)?;
            let m = state.intercept[j].free_count();
            state.intercept[j].free_mut().copy_from_slice(&mean.as_slice()[..m]);
            state.slope[j].free_mut().copy_from_slice(&mean.as_slice()[m..]);
        }
        best = best.min(model.residual_sum_of_squares(&state)?);
    }
    let n = data.num_obs() as f64;
    let sigma2 = (best / n).max(f64::MIN_POSITIVE);
    let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let per_surface = state.intercept[0].free_count();
    Ok((ll, data.regions() * 2 * per_surface + 1))
}

fn evaluate_grid(
    data: &Dataset,
    kind: VariantKind,
    cells: &[(usize, usize)],
    with_warp_params: bool,
    dirs: &[Directions],
) -> Result<(Vec<BicRow>, Vec<BicRecord>)> {
    let n_obs = data.num_obs();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..dirs.len()).map(move |d| (c, d))).collect();
    let records: Vec<BicRecord> = jobs
        .par_iter()
        .map(|&(c, d)| {
            let (k, kp) = cells[c];
            let (ll, mut params) = conditional_fit(data, kind, k, kp, &dirs[d])?;
            if with_warp_params {
                params += kp - 1;
            }
            Ok(BicRecord {
                k,
                k_prime: kp,
                replicate: d,
                bic: -2.0 * ll + params as f64 * (n_obs as f64).ln(),
                params,
                n_obs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(k, kp))| {
            let mine: Vec<&BicRecord> = records.iter().skip(c * dirs.len()).take(dirs.len()).collect();
            BicRow {
                k,
                k_prime: kp,
                mean_bic: mine.iter().map(|r| r.bic).sum::<f64>() / mine.len() as f64,
                params: mine[0].params,
                n_obs,
            }
        })
        .collect();
    Ok((rows, records))
}

fn argmin(rows: &[BicRow]) -> &BicRow {
    rows.iter()
        .min_by(|a, b| a.mean_bic.total_cmp(&b.mean_bic))
        .expect("non-empty grid")
}

/// Chooses `K` by average BIC over `n_draws` random direction pairs, then
/// `K′` by a nested pass at the chosen `K`.
pub fn select_k_bic<R: Rng + ?Sized>(
    data: &Dataset,
    kind: VariantKind,
    grid: &[usize],
    n_draws: usize,
    rng: &mut R,
) -> Result<BicSelection> {
    select_k_bic_with(data, kind, grid, grid, n_draws, rng)
}

/// As [`select_k_bic`] with a separate grid for `K′`.
pub fn select_k_bic_with<R: Rng + ?Sized>(
    data: &Dataset,
    kind: VariantKind,
    grid: &[usize],
    k_prime_grid: &[usize],
    n_draws: usize,
    rng: &mut R,
) -> Result<BicSelection> {
    if grid.is_empty() || k_prime_grid.is_empty() {
        return Err(Error::invalid("BIC grid is empty"));
    }
    if n_draws == 0 {
        return Err(Error::invalid("BIC needs at least one random direction"));
    }
    let degree = VariantSpec::new(kind, 4, 4).degree;
    if let Some(&bad) = grid.iter().chain(k_prime_grid).find(|&&k| k < degree + 1) {
        return Err(Error::invalid(format!("grid value {bad} is below {}", degree + 1)));
    }
    if data.num_obs() == 0 {
        return Err(Error::Empty("no observations".into()));
    }
    let master: u64 = rng.random();
    let n_alpha = if kind.regionwise_alpha() { data.regions() } else { 1 };
    let dirs: Vec<Directions> = (0..n_draws)
        .map(|d| {
            let mut r = ChaCha8Rng::seed_from_u64(chain_seed(master, d));
            let beta = kind.uses_x().then(|| random_unit(data.p(), &mut r));
            let etas = (0..n_alpha).map(|_| random_unit(data.k(), &mut r)).collect();
            Directions { beta, etas }
        })
        .collect();
    let cells: Vec<(usize, usize)> = grid.iter().map(|&k| (k, k)).collect();
    let (k_table, mut records) = evaluate_grid(data, kind, &cells, false, &dirs)?;
    let k = argmin(&k_table).k;
    let cells: Vec<(usize, usize)> = k_prime_grid.iter().map(|&kp| (k, kp)).collect();
    let (k_prime_table, more) = evaluate_grid(data, kind, &cells, true, &dirs)?;
    records.extend(more);
    let k_prime = argmin(&k_prime_table).k_prime;
    Ok(BicSelection {
        k,
        k_prime,
        k_table,
        k_prime_table,
        records,
    })
}

/// Covariate coordinates touched by angle `r` of `n` angles: interior
/// angle `r` zeroes coordinate `r`, the last one governs the final two.
fn coords_of_angle(r: usize, n: usize) -> Vec<usize> {
    if r + 1 == n {
        vec![r, r + 1]
    } else {
        vec![r]
    }
}

/// Per-coordinate inclusion frequency (length `p`).
pub fn coordinate_frequencies(chain: &Chain<ModelState>) -> Vec<f64> {
    let freq = chain.inclusion_frequencies();
    let n = freq.len();
    let mut out = vec![0.0; n + 1];
    for (r, &f) in freq.iter().enumerate() {
        for c in coords_of_angle(r, n) {
            out[c] = f;
        }
    }
    if n == 0 {
        out.clear();
    }
    out
}

/// Coordinates whose angle has inclusion frequency strictly above
/// `threshold`.
pub fn select_variables(chain: &Chain<ModelState>, threshold: f64) -> Result<Vec<usize>> {
    if chain.is_empty() {
        return Err(Error::Empty("chain has no draws".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let freq = chain.inclusion_frequencies();
    let n = freq.len();
    let mut out: Vec<usize> = freq
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > threshold)
        .flat_map(|(r, _)| coords_of_angle(r, n))
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Indices of the `k` largest scores, ties broken by the secondary score
/// (larger first) and then by index.
pub fn top_k_by(primary: &[f64], secondary: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..primary.len()).collect();
    idx.sort_by(|&a, &b| {
        primary[b]
            .total_cmp(&primary[a])
            .then(secondary[b].total_cmp(&secondary[a]))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// The `k` coordinates with the highest inclusion frequency.
pub fn top_k_variables(chain: &Chain<ModelState>, k: usize) -> Result<Vec<usize>> {
    if chain.is_empty() {
        return Err(Error::Empty("chain has no draws".into()));
    }
    let freq = coordinate_frequencies(chain);
    if k > freq.len() {
        return Err(Error::invalid(format!("k = {k} exceeds p = {}", freq.len())));
    }
    let mags = chain
        .posterior_mean_abs_beta()
        .ok_or_else(|| Error::InvalidState("chain carries no direction".into()))?;
    Ok(top_k_by(&freq, &mags, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_data;
    use crate::priors::InclusionIndicators;
    use crate::splines::SurfaceCoefficients;
    use crate::polar::PolarAngles;

    fn fixture_chain(freqs: &[f64], draws: usize) -> Chain<ModelState> {
        let n = freqs.len();
        let state = ModelState {
            theta: Some(PolarAngles::new(vec![1.0; n]).unwrap()),
            gamma: Some(InclusionIndicators::all(n, false)),
            alpha: vec![PolarAngles::new(vec![1.0]).unwrap()],
            intercept: vec![SurfaceCoefficients::zeros(4, 4)],
            slope: vec![SurfaceCoefficients::zeros(4, 4)],
            timefn: MonotoneTimeFn::uniform(4),
            sigma2: 1.0,
            random_effects: Vec::new(),
            offset: 0.0,
            dp: None,
        };
        Chain {
            draws: vec![state; draws],
            log_posterior: vec![0.0; draws],
            block_names: Vec::new(),
            acceptance: Vec::new(),
            inclusion_counts: freqs.iter().map(|f| (f * draws as f64).round() as u64).collect(),
            config_json: String::new(),
        }
    }

    #[test]
    fn select_variables_threshold_is_strict() {
        let chain = fixture_chain(&[0.9, 0.5, 0.2, 0.7, 0.6], 10);
        assert_eq!(select_variables(&chain, 0.5).unwrap(), vec![0, 3, 4, 5]);
        let all = fixture_chain(&[1.0; 4], 10);
        assert_eq!(select_variables(&all, 0.5).unwrap(), vec![0, 1, 2, 3, 4]);
        let empty = fixture_chain(&[1.0; 4], 0);
        assert!(select_variables(&empty, 0.5).is_err());
    }

    #[test]
    fn top_k_rules() {
        let chain = fixture_chain(&[0.9, 0.5, 0.5, 0.1, 0.3], 10);
        let top = top_k_variables(&chain, 3).unwrap();
        assert_eq!(top[0], 0);
        assert_eq!(top.len(), 3);
        assert_eq!(top_k_variables(&chain, 6).unwrap().len(), 6);
        assert!(top_k_variables(&chain, 7).is_err());
        // frequency ties fall back to magnitude, then index
        assert_eq!(top_k_by(&[1.0, 2.0, 2.0, 2.0], &[0.0, 0.1, 0.3, 0.1], 3), vec![2, 1, 3]);
        // selected set sits inside the matching top-k
        let sel = select_variables(&chain, 0.5).unwrap();
        let tk = top_k_variables(&chain, sel.len()).unwrap();
        assert!(sel.iter().all(|s| tk.contains(s)));
    }

    #[test]
    fn warp_grid_reproduces_powers() {
        let d = warp_deltas(6, 2.0);
        let tf = MonotoneTimeFn::new(d).unwrap();
        for (l, c) in tf.coefficients().iter().enumerate() {
            assert!((c - (l as f64 / 5.0).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_grid_and_determinism() {
        let d = toy_data(8, 10, 3, 2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = select_k_bic(&d, VariantKind::Base, &[5], 2, &mut rng).unwrap();
        assert_eq!((s.k, s.k_prime), (5, 5));
        assert_eq!(s.k_table.len(), 1);
        let a = select_k_bic(&d, VariantKind::Base, &[4, 5, 6], 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = select_k_bic(&d, VariantKind::Base, &[4, 5, 6], 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(select_k_bic(&d, VariantKind::Base, &[3], 2, &mut rng).is_err());
        assert!(select_k_bic(&d, VariantKind::Base, &[], 2, &mut rng).is_err());
    }

    #[test]
    fn bic_penalty_grows_with_parameters() {
        let d = toy_data(8, 10, 3, 2, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = select_k_bic(&d, VariantKind::Base, &[4, 6], 1, &mut rng).unwrap();
        for r in &s.records {
            let n = r.n_obs as f64;
            let implied_ll = -(r.bic - r.params as f64 * n.ln()) / 2.0;
            assert!(implied_ll.is_finite());
        }
        assert!(s.k_table[1].params > s.k_table[0].params);
        let p_rows = &s.k_prime_table;
        assert_eq!(p_rows[1].params - p_rows[0].params, 2);
    }
}
