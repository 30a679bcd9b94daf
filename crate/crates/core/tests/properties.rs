mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_state, toy_data, TWO_PI};
use hdsim::experiments::max_canonical_correlation;
use hdsim::linalg::RowMatrix;
use hdsim::model::{Model, ModelState, VariantKind, VariantSpec};
use hdsim::persist::{decode_chain, encode_chain};
use hdsim::polar::{polar_to_unit, unit_to_polar, PolarAngles};
use hdsim::priors::{log_last_angle_density, log_spike_density, SpikeSlabConfig};
use hdsim::sampler::{adapt, reflect, run_chain, AdaptStats, Chain, ChainConfig, HmcConfig, Tuning, Q_FACTOR};
use hdsim::selection::{select_variables, top_k_variables};
use hdsim::splines::{eval_timefn, MonotoneTimeFn, SplineBasis, SurfaceCoefficients};

fn interior_angles(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
    (2..max_dim).prop_flat_map(|d| {
        let interior = prop::collection::vec(0.05..PI - 0.05, d - 2);
        (interior, 0.05..TWO_PI - 0.05).prop_map(|(mut a, last)| {
            a.push(last);
            a
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn polar_maps_are_inverse(angles in interior_angles(60)) {
        let beta = polar_to_unit(&PolarAngles::new(angles.clone()).unwrap()).unwrap();
        let norm: f64 = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let back = unit_to_polar(&beta).unwrap();
        for (a, b) in angles.iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn spline_basis_partitions_unity(k in 4usize..20, degree in 1usize..4, x in 0.0f64..=1.0) {
        prop_assume!(k > degree);
        let basis = SplineBasis::uniform(k, degree, -1.0, 1.0).unwrap();
        let vals = basis.eval(2.0 * x - 1.0).unwrap();
        prop_assert_eq!(vals.len(), k);
        prop_assert!(vals.iter().all(|v| (-1e-14..=1.0 + 1e-14).contains(v)));
        prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_warp_is_monotone(deltas in prop::collection::vec(0.01f64..0.99, 3..12), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let tf = MonotoneTimeFn::new(deltas.clone()).unwrap();
        let basis = SplineBasis::uniform(deltas.len() + 1, 3, 0.0, 1.0).unwrap();
        let f = |t: f64| eval_timefn(&tf, &basis, t).unwrap().0;
        prop_assert!(f(0.0).abs() < 1e-12);
        prop_assert!((f(1.0) - 1.0).abs() < 1e-12);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f(lo) <= f(hi) + 1e-12);
    }

    #[test]
    fn surface_ties_are_exact(ku in 3usize..10, kv in 3usize..10, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free: Vec<f64> = (0..ku.div_ceil(2) * kv.div_ceil(2)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = SurfaceCoefficients::from_free(ku, kv, free).unwrap();
        for m in 0..ku {
            for mp in 0..kv {
                prop_assert_eq!(s.get(m, mp), s.get(ku - 1 - m, mp));
                prop_assert_eq!(s.get(m, mp), s.get(m, kv - 1 - mp));
            }
        }
    }

    #[test]
    fn spike_density_is_symmetric(d in 0.001f64..FRAC_PI_2 - 0.001, m1 in 0.05f64..0.95, m2 in 1.0f64..30.0) {
        let cfg = SpikeSlabConfig::new(m1, m2, 0.5).unwrap();
        let l = log_spike_density(FRAC_PI_2 - d, &cfg);
        let r = log_spike_density(FRAC_PI_2 + d, &cfg);
        prop_assert!((l - r).abs() < 1e-9 * l.abs().max(1.0));
    }

    #[test]
    fn last_angle_density_mirrors(t in 0.001f64..PI - 0.001) {
        let cfg = SpikeSlabConfig::default();
        let a = log_last_angle_density(t, &cfg);
        let b = log_last_angle_density(TWO_PI - t, &cfg);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn reflection_stays_in_bounds(x in -50.0f64..50.0, lo in -3.0f64..3.0, w in 0.1f64..5.0) {
        let y = reflect(x, lo, lo + w);
        prop_assert!(y >= lo && y <= lo + w);
        if x >= lo && x <= lo + w {
            prop_assert_eq!(y, x);
        }
    }

    #[test]
    fn q_control_law(q in 1e-4f64..0.4, size in 0.0f64..60.0, lo in 5usize..25, width in 0usize..15, burn in any::<bool>()) {
        let hmc = HmcConfig::default();
        let tuning = Tuning::new(2, &hmc, q, (lo, lo + width), true);
        let stats = AdaptStats { in_burn_in: burn, accept_probs: vec![0.7, 0.7], mean_model_size: Some(size) };
        let next = adapt(&stats, &tuning);
        if !burn {
            prop_assert!(next.frozen);
            prop_assert_eq!(next.q, q);
            prop_assert_eq!(adapt(&stats, &next), next);
        } else if size > (lo + width) as f64 {
            prop_assert!((next.q - q / Q_FACTOR).abs() < 1e-15);
        } else if size < lo as f64 {
            prop_assert!((next.q - q * Q_FACTOR).abs() < 1e-15);
        } else {
            prop_assert_eq!(next.q, q);
        }
    }

    #[test]
    fn canonical_correlation_bounded_and_invariant(seed in any::<u64>(), n in 12usize..40, ka in 1usize..4, kb in 1usize..4) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = |k: usize| RowMatrix::from_vec(n, k, (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = block(ka);
        let b = block(kb);
        let mix: Vec<f64> = (0..ka * ka).map(|i| if i % (ka + 1) == 0 { 2.0 } else { 0.3 }).collect();
        let mut a2 = RowMatrix::zeros(n, ka);
        for i in 0..n {
            for c in 0..ka {
                a2.row_mut(i)[c] = (0..ka).map(|r| a.get(i, r) * mix[r * ka + c]).sum();
            }
        }
        let r1 = max_canonical_correlation(&a, &b).unwrap();
        let r2 = max_canonical_correlation(&a2, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r1));
        prop_assert!((r1 - r2).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn state_persistence_round_trips(seed in any::<u64>(), kind in 0usize..3) {
        let kind = [VariantKind::Base, VariantKind::RandomEffectRegionwise, VariantKind::NoSnp][kind];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = if kind.uses_x() { 7 } else { 0 };
        let data = toy_data(5, p, 3, 2, 3, &mut rng);
        let model = Model::new(&data, VariantSpec::new(kind, 5, 4)).unwrap();
        let draws: Vec<ModelState> = (0..3).map(|_| random_state(&model, &mut rng)).collect();
        let chain = Chain {
            draws,
            log_posterior: vec![-1.5, f64::MIN_POSITIVE, 3.25],
            block_names: vec!["theta".into()],
            acceptance: vec![vec![true], vec![false], vec![true]],
            inclusion_counts: vec![1; p.saturating_sub(1)],
            config_json: "{}".into(),
        };
        let bytes = encode_chain(&chain).unwrap();
        let back: Chain<ModelState> = decode_chain(&bytes).unwrap();
        prop_assert_eq!(&back, &chain);
        prop_assert_eq!(encode_chain(&back).unwrap(), bytes);
    }

    #[test]
    fn chain_states_satisfy_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = toy_data(6, 9, 3, 2, 3, &mut rng);
        let cfg = ChainConfig::new(VariantSpec::new(VariantKind::Base, 5, 4), 30, 10, seed);
        let chain = run_chain(&data, &cfg).unwrap();
        for s in &chain.draws {
            let th = s.theta.as_ref().unwrap();
            prop_assert!(th.validate().is_ok());
            prop_assert!(s.sigma2 > 0.0);
            let d = s.timefn.deltas();
            prop_assert!(d.iter().all(|&x| x > 0.0 && x < 1.0));
        }
        prop_assert!(chain.inclusion_counts.iter().all(|&c| c as usize <= chain.draws.len()));
        // thresholded selection sits inside the same-size top-k set
        let sel = select_variables(&chain, 0.5).unwrap();
        let freq = chain.inclusion_frequencies();
        if !sel.is_empty() && freq.iter().all(|f| (f - 0.5).abs() > 1e-12) {
            let top = top_k_variables(&chain, sel.len()).unwrap();
            prop_assert!(sel.iter().all(|c| top.contains(c)), "{sel:?} vs {top:?}");
        }
    }
}
