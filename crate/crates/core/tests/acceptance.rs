//! Acceptance suite: one test per criterion, each printing a verdict line.

mod common;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{integrate, mean_and_se, random_state, report, toy_data};
use hdsim::experiments::{run_benchmark, BenchmarkConfig, EvalReport, Scenario, METHOD_HORSESHOE, METHOD_SIM};
use hdsim::model::{Model, ModelState, VariantKind, VariantSpec};
use hdsim::persist::{decode_chain, encode_chain, load_chain, save_chain};
use hdsim::polar::{polar_to_unit, unit_to_polar, PolarAngles};
use hdsim::priors::{last_piece_log_density, log_last_angle_density, log_spike_density, SpikeSlabConfig};
use hdsim::sampler::{
    hmc_blocks, hmc_step, leapfrog_reflective, run_chain, sweep, ChainConfig, HmcConfig, ReflectionMode, SweepPlan, Tuning,
};
use hdsim::splines::{fold_index, SplineBasis};

fn finite_difference(model: &Model, state: &ModelState, h: f64, set: impl Fn(&mut ModelState, f64)) -> f64 {
    let mut plus = state.clone();
    set(&mut plus, h);
    let mut minus = state.clone();
    set(&mut minus, -h);
    (model.log_posterior(&plus).unwrap() - model.log_posterior(&minus).unwrap()) / (2.0 * h)
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let kinds = [VariantKind::Base, VariantKind::RandomEffectRegionwise, VariantKind::NoSnp];
    let h = 1e-6;
    let tol = 1e-4;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for inst in 0..100 {
        let kind = kinds[inst % 3];
        let n = rng.random_range(3..=10);
        let p = if kind.uses_x() { rng.random_range(2..=50) } else { 0 };
        let k = rng.random_range(2..=5);
        let j = rng.random_range(1..=3);
        let t = rng.random_range(2..=4);
        let data = toy_data(n, p, k, j, t, &mut rng);
        let basis = rng.random_range(4..=7);
        let model = Model::new(&data, VariantSpec::new(kind, basis, rng.random_range(4..=6))).unwrap();
        let state = random_state(&model, &mut rng);
        let g = model.grad_blocks(&state).unwrap();
        let mut check = |name: String, analytic: f64, fd: f64| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
            checked += 1;
            if rel > tol {
                failures.push(format!("instance {inst} {name}: analytic {analytic} vs fd {fd}"));
            }
        };
        if let Some(th) = &state.theta {
            for r in 0..th.len() {
                let fd = finite_difference(&model, &state, h, |s, e| s.theta.as_mut().unwrap().as_mut_slice()[r] += e);
                check(format!("theta[{r}]"), g.theta[r], fd);
            }
        }
        for a in 0..state.alpha.len() {
            for r in 0..state.alpha[a].len() {
                let fd = finite_difference(&model, &state, h, |s, e| s.alpha[a].as_mut_slice()[r] += e);
                check(format!("alpha[{a}][{r}]"), g.alpha[a][r], fd);
            }
        }
        for r in 0..g.deltas.len() {
            let fd = finite_difference(&model, &state, h, |s, e| {
                let mut d = s.timefn.deltas().to_vec();
                d[r] += e;
                s.timefn.set_deltas(&d);
            });
            check(format!("delta[{r}]"), g.deltas[r], fd);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("{checked} partials over 100 instances, worst relative error {worst:.2e}, {secs:.1} s"),
    );
    assert!(pass, "{failures:?}");
}

/// Folded basis values `Σ_{fold(m)=b} B_m(x)`.
fn folded(basis: &SplineBasis, x: f64) -> Vec<f64> {
    let k = basis.num_basis();
    let mut out = vec![0.0; k.div_ceil(2)];
    for (m, v) in basis.eval(x).unwrap().into_iter().enumerate() {
        out[fold_index(m, k)] += v;
    }
    out
}

#[test]
fn criterion_02_conjugate_conditionals_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let data = toy_data(4, 0, 3, 1, 3, &mut rng);
    let mut spec = VariantSpec::new(VariantKind::NoSnp, 5, 4);
    spec.a = 1.7;
    spec.d1 = 2.5;
    spec.d2 = 0.8;
    let model = Model::new(&data, spec.clone()).unwrap();
    let state = random_state(&model, &mut rng);
    assert_eq!(state.intercept[0].free_count(), 3);

    let v_basis = SplineBasis::uniform(5, 3, -1.0, 1.0).unwrap();
    let t_basis = SplineBasis::uniform(4, 3, 0.0, 1.0).unwrap();
    let lambda = state.timefn.coefficients();
    let eta = state.eta(0);
    let obs = data.observations();
    let mut design = DMatrix::<f64>::zeros(obs.len(), 6);
    let mut resid = DVector::<f64>::zeros(obs.len());
    for (r, o) in obs.iter().enumerate() {
        let v: f64 = data.z().row(o.subject).iter().zip(&eta).map(|(a, b)| a * b).sum();
        let fv = folded(&v_basis, v);
        let warp: f64 = t_basis.eval(o.time).unwrap().iter().zip(&lambda).map(|(b, l)| b * l).sum();
        for c in 0..3 {
            design[(r, c)] = fv[c];
            design[(r, 3 + c)] = -warp * fv[c];
        }
        resid[r] = o.value - state.random_effects[o.subject] - state.offset;
    }
    let s2 = state.sigma2;
    let mut prec = design.transpose() * &design / s2;
    for c in 0..6 {
        prec[(c, c)] += 1.0 / (spec.a * spec.a);
    }
    let mean = prec.clone().cholesky().unwrap().solve(&(design.transpose() * &resid / s2));
    let (m_mean, m_prec) = model.surface_conditional(&state, 0).unwrap();
    let mean_err = (&m_mean - &mean).amax();
    let prec_err = (&m_prec - &prec).amax();
    let cov_err = (m_prec.try_inverse().unwrap() - prec.try_inverse().unwrap()).amax();

    let coef = DVector::from_iterator(6, state.intercept[0].free().iter().chain(state.slope[0].free()).copied());
    let rss = (&resid - &design * coef).norm_squared();
    let (shape, rate) = model.sigma2_conditional(&state).unwrap();
    let shape_err = (shape - (spec.d1 + obs.len() as f64 / 2.0)).abs();
    let rate_err = (rate - (spec.d2 + rss / 2.0)).abs();

    let worst = mean_err.max(prec_err).max(cov_err).max(shape_err).max(rate_err);
    let pass = worst < 1e-10;
    report(
        2,
        "conjugacy oracles",
        pass,
        &format!("mean {mean_err:.1e}, precision {prec_err:.1e}, covariance {cov_err:.1e}, shape {shape_err:.1e}, rate {rate_err:.1e}"),
    );
    assert!(pass);
}

fn hmc_draws(
    log_density: impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    bounds: (f64, f64),
    cfg: &HmcConfig,
    mode: ReflectionMode,
    start: f64,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = vec![start];
    (0..n)
        .map(|_| {
            q = hmc_step(&q, &log_density, &[bounds], cfg, mode, &mut rng).position;
            q[0]
        })
        .collect()
}

fn within(draws: &[f64], mean: f64, var: f64) -> (bool, String) {
    let (m, se_m) = mean_and_se(draws, 100);
    let sq: Vec<f64> = draws.iter().map(|x| (x - mean).powi(2)).collect();
    let (v, se_v) = mean_and_se(&sq, 100);
    let ok = (m - mean).abs() < 3.0 * se_m && (v - var).abs() < 3.0 * se_v;
    (ok, format!("mean {m:.4} ({:.1} SE), var {v:.4} ({:.1} SE)", (m - mean) / se_m, (v - var) / se_v))
}

#[test]
fn criterion_03_reflective_hmc_calibration() {
    let n = 100_000;
    let normal = |q: &[f64]| Some((-0.5 * q[0] * q[0], vec![-q[0]]));
    let cfg = HmcConfig {
        step_size: 0.25,
        leapfrog_steps: 7,
        ..HmcConfig::default()
    };
    let inf = (f64::NEG_INFINITY, f64::INFINITY);
    let (ok_a, da) = within(&hmc_draws(normal, inf, &cfg, ReflectionMode::LeapfrogReflection, 0.0, n, 31), 0.0, 1.0);

    let flat = |_: &[f64]| Some((0.0, vec![0.0]));
    let cfg_u = HmcConfig {
        step_size: 0.3,
        leapfrog_steps: 9,
        ..HmcConfig::default()
    };
    let mut ok_b = true;
    let mut db = Vec::new();
    for (mode, seed) in [(ReflectionMode::LeapfrogReflection, 32), (ReflectionMode::PaperReflection, 33)] {
        let (ok, d) = within(&hmc_draws(flat, (0.0, PI), &cfg_u, mode, 1.0, n, seed), FRAC_PI_2, PI * PI / 12.0);
        ok_b &= ok;
        db.push(format!("{mode:?}: {d}"));
    }

    // reversibility through wall hits
    let target = |q: &[f64]| Some((-0.5 * (q[0] - 1.0).powi(2), vec![-(q[0] - 1.0)]));
    let cfg_r = HmcConfig {
        step_size: 0.1,
        leapfrog_steps: 40,
        ..HmcConfig::default()
    };
    let mut rev = 0.0f64;
    for mode in [ReflectionMode::LeapfrogReflection, ReflectionMode::PaperReflection] {
        for &(q0, p0) in &[(0.1, -3.0), (3.0, 4.0), (1.5, 7.5)] {
            let start = target(&[q0]).unwrap();
            let (q1, p1, _) = leapfrog_reflective(&[q0], &[p0], start, target, &[(0.0, PI)], &cfg_r, mode).unwrap();
            let back = target(&q1).unwrap();
            let (q2, p2, _) = leapfrog_reflective(&q1, &[-p1[0]], back, target, &[(0.0, PI)], &cfg_r, mode).unwrap();
            rev = rev.max((q2[0] - q0).abs()).max((p2[0] + p0).abs());
        }
    }
    let ok_r = rev < 1e-8;
    let pass = ok_a && ok_b && ok_r;
    report(
        3,
        "sampler calibration",
        pass,
        &format!("normal: {da}; uniform: {}; reversibility error {rev:.1e}", db.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_04_prior_densities_integrate_to_one() {
    let mut worst = 0.0f64;
    let mut ordered = true;
    for &(m1, m2) in &[(0.1, 10.0), (0.05, 20.0), (0.5, 2.0)] {
        let cfg = SpikeSlabConfig::new(m1, m2, 0.5).unwrap();
        let spike = |t: f64| log_spike_density(t, &cfg).exp();
        let total = integrate(&spike, 0.0, FRAC_PI_2) + integrate(&spike, FRAC_PI_2, PI);
        worst = worst.max((total - 1.0).abs());
        let mut last = 0.0;
        for k in 0..8 {
            // piece-local coordinates keep both poles at an exact zero
            let lo = |y: f64| last_piece_log_density(k, y, 1.0 - y, &cfg).exp();
            let hi = |s: f64| last_piece_log_density(k, 1.0 - s, s, &cfg).exp();
            last += FRAC_PI_4 * (integrate(&lo, 0.0, 0.5) + integrate(&hi, 0.0, 0.5));
        }
        worst = worst.max((last - 1.0).abs());
        // the piece form agrees with the angle form away from the seams
        for &th in &[0.3, 1.0, 2.2, 3.9, 5.5] {
            let k = (th / FRAC_PI_4).floor() as usize;
            let y = th / FRAC_PI_4 - k as f64;
            assert!((last_piece_log_density(k, y, 1.0 - y, &cfg) - log_last_angle_density(th, &cfg)).abs() < 1e-9);
        }
        // concentration near π/2 on both sides, decaying toward the walls
        let f = |t: f64| log_spike_density(t, &cfg);
        let mode = cfg.spike_mode();
        for side in [1.0, -1.0] {
            let at = |d: f64| f(FRAC_PI_2 + side * d);
            let d_mode = FRAC_PI_2 - mode;
            ordered &= at(d_mode) > at(d_mode + 0.2) && at(d_mode + 0.2) > at(FRAC_PI_4) && at(FRAC_PI_4) > at(FRAC_PI_2 - 0.05);
        }
        ordered &= f(mode) > (1.0 / PI).ln();
    }
    // Figure-shaped last angle: peaks near multiples of π/2
    let cfg = SpikeSlabConfig::default();
    for k in 0..=4 {
        let c = k as f64 * FRAC_PI_2;
        let near = (c + 1e-3).clamp(1e-3, 2.0 * PI - 1e-3);
        let far = if k < 4 { c + FRAC_PI_4 * 0.5 } else { c - FRAC_PI_4 * 0.5 };
        ordered &= log_last_angle_density(near, &cfg) > log_last_angle_density(far, &cfg);
    }
    let pass = worst < 1e-6 && ordered;
    report(4, "prior integration", pass, &format!("worst |integral - 1| = {worst:.2e}, ordering checks {ordered}"));
    assert!(pass);
}

#[test]
fn criterion_05_polar_round_trip_and_sparsity() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(2..=500);
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let back = polar_to_unit(&unit_to_polar(&u).unwrap()).unwrap();
        worst = worst.max(u.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let mut exact = true;
    for _ in 0..200 {
        let d = rng.random_range(3..=60);
        let mut angles: Vec<f64> = (0..d - 1)
            .map(|r| if r + 2 == d { rng.random_range(0.1..2.0 * PI - 0.1) } else { rng.random_range(0.1..PI - 0.1) })
            .collect();
        let spiked: Vec<usize> = (0..d - 2).filter(|_| rng.random_bool(0.5)).collect();
        for &s in &spiked {
            angles[s] = FRAC_PI_2;
        }
        let last_spiked = rng.random_bool(0.5);
        if last_spiked {
            angles[d - 2] = FRAC_PI_2;
        }
        let beta = polar_to_unit(&PolarAngles::new(angles).unwrap()).unwrap();
        exact &= spiked.iter().all(|&s| beta[s] == 0.0);
        if last_spiked {
            exact &= beta[d - 2] == 0.0;
        }
    }
    let pass = worst < 1e-10 && exact;
    report(5, "polar correctness", pass, &format!("max round-trip error {worst:.2e}, exact zeros {exact}"));
    assert!(pass);
}

#[test]
fn criterion_06_geweke_joint_distribution() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let data = toy_data(4, 5, 3, 1, 3, &mut rng);
    let mut spec = VariantSpec::new(VariantKind::Base, 4, 4);
    spec.d1 = 5.0;
    spec.d2 = 4.0;
    spec.a = 1.0;
    spec.spike = SpikeSlabConfig::new(0.1, 10.0, 0.3).unwrap();
    let mut model = Model::new(&data, spec.clone()).unwrap();
    let stats = |s: &ModelState| [s.sigma2, s.theta.as_ref().unwrap().as_slice()[1], s.intercept[0].free()[0]];

    let m_forward = 100_000;
    let mut forward: [Vec<f64>; 3] = Default::default();
    for _ in 0..m_forward {
        let s = model.sample_prior(&mut rng).unwrap();
        for (v, x) in forward.iter_mut().zip(stats(&s)) {
            v.push(x);
        }
    }

    let blocks = hmc_blocks(&model);
    let hmc = HmcConfig {
        step_size: 0.05,
        leapfrog_steps: 10,
        ..HmcConfig::default()
    };
    let tuning = Tuning::new(blocks.len(), &hmc, spec.spike.q(), (1, 3), false);
    let plan = SweepPlan::default();
    let mut state = model.sample_prior(&mut rng).unwrap();
    let y = model.simulate_values(&state, &mut rng).unwrap();
    model.set_values(&y).unwrap();
    let m_sc = 200_000;
    let mut chain: [Vec<f64>; 3] = Default::default();
    for _ in 0..m_sc {
        sweep(&model, &mut state, &tuning, &plan, ReflectionMode::LeapfrogReflection, &mut rng).unwrap();
        let y = model.simulate_values(&state, &mut rng).unwrap();
        model.set_values(&y).unwrap();
        for (v, x) in chain.iter_mut().zip(stats(&state)) {
            v.push(x);
        }
    }

    let names = ["sigma2", "theta[1]", "intercept[0]"];
    let mut pass = true;
    let mut detail = Vec::new();
    for q in 0..3 {
        let (mf, sf) = mean_and_se(&forward[q], 100);
        let (mc, sc) = mean_and_se(&chain[q], 100);
        let z = (mf - mc) / (sf * sf + sc * sc).sqrt();
        pass &= z.abs() < 3.0;
        detail.push(format!("{} {mf:.4} vs {mc:.4} (z = {z:.2})", names[q]));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 600.0;
    report(6, "Geweke joint distribution", pass, &format!("{}; {secs:.0} s", detail.join(", ")));
    assert!(pass);
}

fn desk_report(scenario: Scenario) -> &'static EvalReport {
    static NONLINEAR: OnceLock<EvalReport> = OnceLock::new();
    static LINEAR: OnceLock<EvalReport> = OnceLock::new();
    let cell = match scenario {
        Scenario::Nonlinear => &NONLINEAR,
        Scenario::Linear => &LINEAR,
    };
    cell.get_or_init(|| {
        let start = Instant::now();
        let cfg = BenchmarkConfig::new(scenario, 200, 500, 5, 2024);
        let report = run_benchmark(&cfg).unwrap();
        for r in &report.rows {
            common::report(
                0,
                &format!("{scenario} replication {} {}", r.replication, r.method),
                r.error.is_none(),
                &format!(
                    "mse {:.4}, canonical correlation {:.4}, overlap {:.3}{}",
                    r.mse,
                    r.canonical_correlation,
                    r.support_overlap,
                    r.error.as_deref().map(|e| format!(", error {e}")).unwrap_or_default()
                ),
            );
        }
        common::report(0, &format!("{scenario} benchmark"), true, &format!("{:.0} s", start.elapsed().as_secs_f64()));
        report
    })
}

/// Paired rows `(single-index, horseshoe)` per replication; failed fits are
/// `None`.
fn paired(report: &EvalReport) -> Vec<(Option<f64>, Option<f64>)> {
    (0..report.config.replications)
        .map(|r| {
            let get = |m: &str| {
                report
                    .rows
                    .iter()
                    .find(|row| row.replication == r && row.method == m && row.error.is_none())
                    .map(|row| row.mse)
            };
            (get(METHOD_SIM), get(METHOD_HORSESHOE))
        })
        .collect()
}

fn mean_of(report: &EvalReport, method: &str, f: impl Fn(&hdsim::experiments::EvalRow) -> f64) -> f64 {
    let rows = report.method_rows(method);
    rows.iter().map(|r| f(r)).sum::<f64>() / rows.len().max(1) as f64
}

#[test]
fn criterion_07_nonlinear_scenario_direction() {
    let rep = desk_report(Scenario::Nonlinear);
    let wins = paired(rep).iter().filter(|(s, h)| matches!((s, h), (Some(s), Some(h)) if s < h)).count();
    let cc_sim = mean_of(rep, METHOD_SIM, |r| r.canonical_correlation);
    let cc_hs = mean_of(rep, METHOD_HORSESHOE, |r| r.canonical_correlation);
    let mse_sim = mean_of(rep, METHOD_SIM, |r| r.mse);
    let mse_hs = mean_of(rep, METHOD_HORSESHOE, |r| r.mse);
    let pass = wins >= 4 && cc_sim - cc_hs >= 0.05;
    report(
        7,
        "nonlinear desk-scale direction",
        pass,
        &format!(
            "single-index MSE lower in {wins}/5 (means {mse_sim:.3} vs {mse_hs:.3}); canonical correlation {cc_sim:.3} vs {cc_hs:.3} (margin {:.3})",
            cc_sim - cc_hs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_linear_scenario_direction() {
    let rep = desk_report(Scenario::Linear);
    let wins = paired(rep).iter().filter(|(s, h)| matches!((s, h), (Some(s), Some(h)) if h <= s)).count();
    let mse_sim = mean_of(rep, METHOD_SIM, |r| r.mse);
    let mse_hs = mean_of(rep, METHOD_HORSESHOE, |r| r.mse);
    let sims = rep.method_rows(METHOD_SIM).len();
    let pass = wins >= 4 && sims == 5 && mse_sim <= 2.5;
    report(
        8,
        "linear desk-scale direction",
        pass,
        &format!("horseshoe MSE no larger in {wins}/5; mean MSE single-index {mse_sim:.3}, horseshoe {mse_hs:.3}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_top_k_support_recovery() {
    let rep = desk_report(Scenario::Nonlinear);
    let rows = rep.method_rows(METHOD_SIM);
    let overlap = mean_of(rep, METHOD_SIM, |r| r.support_overlap);
    let pass = rows.len() == 5 && overlap >= 0.4;
    let each: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.support_overlap)).collect();
    report(
        9,
        "variable selection sanity",
        pass,
        &format!("mean top-25 overlap {overlap:.3} (replications {})", each.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let data = toy_data(8, 30, 3, 2, 3, &mut rng);
    let mut identical = true;
    let mut round_trip = true;
    for kind in [VariantKind::Base, VariantKind::RandomEffectRegionwise, VariantKind::NoSnp] {
        let data = if kind.uses_x() { data.clone() } else { data.without_x() };
        let cfg = ChainConfig::new(VariantSpec::new(kind, 5, 4), 60, 20, 77);
        let a = run_chain(&data, &cfg).unwrap();
        let b = run_chain(&data, &cfg).unwrap();
        let bytes = encode_chain(&a).unwrap();
        identical &= bytes == encode_chain(&b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        save_chain(&a, &path).unwrap();
        let loaded: hdsim::sampler::Chain<ModelState> = load_chain(&path).unwrap();
        round_trip &= loaded == a && std::fs::read(&path).unwrap() == bytes;
        let decoded: hdsim::sampler::Chain<ModelState> = decode_chain(&bytes).unwrap();
        round_trip &= decoded
            .draws
            .iter()
            .zip(&a.draws)
            .all(|(x, y)| x.sigma2.to_bits() == y.sigma2.to_bits() && x == y);
    }
    let pass = identical && round_trip;
    report(10, "determinism and persistence", pass, &format!("byte-identical reruns {identical}, exact round trip {round_trip}"));
    assert!(pass);
}
