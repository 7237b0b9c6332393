//! Property tests for invariants that span modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use etlr_core::ensemble::{importance_weights, netf_transform, sym_sqrt};
use etlr_core::harness::{Summary, TrialReport};
use etlr_core::homotopy::{enkbf_step, enkbf_step_tamed, second_order_step};
use etlr_core::langevin::mkv_diffusion_step;
use etlr_core::model::{hessian_factors, nll_data, AffineReparam, LogisticTerm};
use etlr_core::{
    ClipPolicy, DataTerm, Dataset, DropoutPolicy, Ensemble, GaussianPrior, TransformMatrix,
};

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn dataset(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let phi = normal(d, n, rng);
    let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    Dataset::new(phi, labels).unwrap()
}

/// A well-conditioned `A` and an offset `b`.
fn affine(d: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::identity(d, d) + normal(d, d, rng) * 0.3;
    let b = normal(d, 1, rng).column(0).into_owned();
    (a, b)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hessian_weights_lie_in_unit_quarter(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = dataset(3, 15, &mut rng);
        let theta = normal(3, 1, &mut rng).column(0) * scale;
        let f = hessian_factors(&theta, &data).unwrap();
        for &r in f.weights.iter() {
            prop_assert!((0.0..=0.25).contains(&r));
        }
        let min = SymmetricEigen::new(f.hessian).eigenvalues.min();
        prop_assert!(min >= -1e-12);
    }

    #[test]
    fn clipped_nll_is_bounded_below(seed in 0u64..10_000, scale in 0.1f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = dataset(2, 12, &mut rng);
        let theta = normal(2, 1, &mut rng).column(0) * scale;
        let nll = nll_data(&theta, &data, &ClipPolicy::default()).unwrap();
        let bound = -(data.len() as f64) * 0.995f64.ln();
        prop_assert!(nll >= bound - 1e-12);
    }

    #[test]
    fn transforms_commute_with_affine_maps(seed in 0u64..10_000, m in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Ensemble::new(normal(3, m, &mut rng)).unwrap();
        let mut s = normal(m, m, &mut rng);
        for mut col in s.column_iter_mut() {
            let fix = (1.0 - col.sum()) / m as f64;
            col.add_scalar_mut(fix);
        }
        let s = TransformMatrix::new(s).unwrap();
        let (a, b) = affine(3, &mut rng);
        let left = e.affine_map(&a, &b).unwrap().apply_transform(&s).unwrap();
        let right = e.apply_transform(&s).unwrap().affine_map(&a, &b).unwrap();
        prop_assert!((left.particles() - right.particles()).amax() < 1e-12 * (1.0 + right.particles().amax()));
    }

    #[test]
    fn sqrt_fixes_projections(seed in 0u64..10_000, d in 1usize..7, k in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = k.min(d);
        let q = normal(d, d, &mut rng).qr().q();
        let basis = q.columns(0, k);
        let p = basis * basis.transpose();
        let s = sym_sqrt(&p).unwrap();
        prop_assert!((s - &p).amax() < 1e-10);
    }

    #[test]
    fn dropout_without_rate_is_plain_covariance(seed in 0u64..10_000, m in 2usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Ensemble::new(normal(4, m, &mut rng)).unwrap();
        let c = e.dropout_covariance(DropoutPolicy::none(), &mut rng).unwrap();
        prop_assert_eq!(c, e.covariance().unwrap());
    }

    #[test]
    fn netf_keeps_the_simplex_constraint(seed in 0u64..10_000, m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0) + 1e-3);
        let w = &w / w.sum();
        let s = netf_transform(&w).unwrap();
        for col in s.matrix().column_iter() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-10);
        }
        let uniform = DVector::from_element(m, 1.0 / m as f64);
        let id = netf_transform(&uniform).unwrap();
        prop_assert!((id.matrix() - DMatrix::<f64>::identity(m, m)).amax() < 1e-12);
    }

    #[test]
    fn importance_weights_are_affine_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let term = LogisticTerm::new(dataset(3, 20, &mut rng), ClipPolicy::default());
        let e = Ensemble::new(normal(3, 10, &mut rng)).unwrap();
        let (a, b) = affine(3, &mut rng);
        let a_inv = a.clone().try_inverse().unwrap();
        let bar = e.affine_map(&a_inv, &(-(&a_inv * &b))).unwrap();
        let bar_term = AffineReparam::new(term.clone(), a, b).unwrap();
        let w = importance_weights(&term.potentials(e.particles()), 0.1).unwrap();
        let w_bar = importance_weights(&bar_term.potentials(bar.particles()), 0.1).unwrap();
        prop_assert!((w - w_bar).amax() < 1e-10);
    }

    #[test]
    fn deterministic_steps_are_affine_invariant(seed in 0u64..10_000, dt in 1e-3f64..0.05) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let term = LogisticTerm::new(dataset(3, 20, &mut rng), ClipPolicy::default());
        let e = Ensemble::new(normal(3, 10, &mut rng)).unwrap();
        let (a, b) = affine(3, &mut rng);
        let a_inv = a.clone().try_inverse().unwrap();
        let bar = e.affine_map(&a_inv, &(-(&a_inv * &b))).unwrap();
        let bar_term = AffineReparam::new(term.clone(), a.clone(), b.clone()).unwrap();
        let cov = e.covariance().unwrap();
        let cov_bar = bar.covariance().unwrap();
        let back = |x: Ensemble| x.affine_map(&a, &b).unwrap().into_inner();
        let pairs = [
            (
                second_order_step(&e, &term, &cov, dt).unwrap(),
                second_order_step(&bar, &bar_term, &cov_bar, dt).unwrap(),
            ),
            (
                enkbf_step(&e, &term, &cov, dt, 1.0).unwrap(),
                enkbf_step(&bar, &bar_term, &cov_bar, dt, 1.0).unwrap(),
            ),
            (
                enkbf_step_tamed(&e, &term, &cov, dt, 1.0).unwrap(),
                enkbf_step_tamed(&bar, &bar_term, &cov_bar, dt, 1.0).unwrap(),
            ),
        ];
        for (orig, mapped) in pairs {
            prop_assert!(rel(&back(mapped), orig.particles()) < 1e-8);
        }
    }

    #[test]
    fn second_order_deviations_never_grow(seed in 0u64..10_000, dt in 1e-3f64..0.02) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let term = LogisticTerm::new(dataset(3, 30, &mut rng), ClipPolicy::default());
        let mut e = Ensemble::new(normal(3, 12, &mut rng)).unwrap();
        for _ in 0..20 {
            let before = e.deviations().norm();
            let cov = e.covariance().unwrap();
            e = second_order_step(&e, &term, &cov, dt).unwrap();
            prop_assert!(e.deviations().norm() <= before * (1.0 + 1e-12));
        }
    }

    #[test]
    fn diffusion_fixes_a_collapsed_ensemble(seed in 0u64..10_000, m in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = GaussianPrior::isotropic(DVector::zeros(2), 1.0).unwrap();
        let centre = normal(2, 1, &mut rng) * 3.0;
        let e = Ensemble::new(DMatrix::from_fn(2, m, |i, _| centre[(i, 0)])).unwrap();
        let next = mkv_diffusion_step(&e, &prior, 0.05, false, &mut rng).unwrap();
        prop_assert!((next.particles() - e.particles()).amax() < 1e-14);
    }

    #[test]
    fn summary_mean_is_mean_of_trial_means(values in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..3.0), 1..30)) {
        let reports: Vec<TrialReport> = values
            .iter()
            .enumerate()
            .map(|(trial, &(x, y, n))| TrialReport {
                trial,
                mean: vec![x, y],
                spectral_norm: n,
                l2_error: Some(n),
                seconds: 0.0,
            })
            .collect();
        let s = Summary::from_reports(&reports).unwrap();
        let l = values.len() as f64;
        let mx = values.iter().map(|v| v.0).sum::<f64>() / l;
        let my = values.iter().map(|v| v.1).sum::<f64>() / l;
        prop_assert!((s.mean_of_means[0] - mx).abs() < 1e-12);
        prop_assert!((s.mean_of_means[1] - my).abs() < 1e-12);
        prop_assert_eq!(s.trials, values.len());
    }
}
