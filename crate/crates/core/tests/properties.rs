//! Randomized invariants across spectra, accountant, mechanisms and SA.

use aggnoise::accountant::{
    account_round, amplify_subsampling, compose, eps_dp_closed_form, rdp_bound, ClosedFormMode, CompositionMode,
    PrivacyParams, RdpContext, RdpVariant, Region, RoundLedger, Route,
};
use aggnoise::fedsim::secure_aggregate;
use aggnoise::linalg::{self, Matrix};
use aggnoise::mechanisms::{clip_gradient, water_filling_trace};
use aggnoise::spectra::{
    estimate_mean_cov, floor_eigenvalues, renyi_gaussian, sample_gaussian, CovarianceModel, GradientMatrix,
};
use aggnoise::verify::{check_necessary_condition, SPAN_TOL};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn vec_in(d: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, d)
}

/// `(dim, clip, columns)` with every column clipped.
fn gradient_set() -> impl Strategy<Value = (usize, f64, Vec<Vec<f64>>)> {
    (1usize..6, 1usize..12, 0.1f64..3.0).prop_flat_map(|(d, n, c)| {
        prop::collection::vec(vec_in(d, 3.0), n).prop_map(move |cols| {
            let cols = cols.into_iter().map(|g| clip_gradient(&g, c).unwrap()).collect();
            (d, c, cols)
        })
    })
}

fn spd(d: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| {
        let a = Matrix::from_fn(d, d, |i, j| v[i * d + j]);
        a.matmul(&a.transpose()).add(&Matrix::identity(d).scale(0.05)).symmetrized()
    })
}

fn high_region(lambda_factor: f64) -> (PrivacyParams, f64) {
    let p = PrivacyParams {
        clip: 2.0,
        batch: 100,
        local_size: 600,
        ns_users: 1,
        delta: 1e-3,
        ..Default::default()
    };
    let threshold = 4.0 * 4.0 * (2.0 * (1.25f64 / 1e-3).ln()).sqrt() / 1e4;
    (p, threshold * lambda_factor)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_second_moment_is_bounded_by_c_squared((d, c, cols) in gradient_set()) {
        let g = GradientMatrix::new(d, cols, c).unwrap();
        let m = estimate_mean_cov(&g, 1, None).unwrap();
        prop_assert!(m.lambda_max() <= c * c * (1.0 + 1e-9));
    }

    #[test]
    fn sum_lambda_min_is_superadditive(mats in (1usize..5).prop_flat_map(|d| prop::collection::vec(spd(d), 2..5))) {
        let d = mats[0].rows();
        let models: Vec<_> = mats
            .iter()
            .map(|m| CovarianceModel::from_covariance(vec![0.0; d], m).unwrap())
            .collect();
        let sum = CovarianceModel::sum(&models).unwrap();
        let lower: f64 = models.iter().map(|m| m.lambda_min()).sum();
        prop_assert!(sum.lambda_min() >= lower - 1e-10 * sum.lambda_max());
    }

    #[test]
    fn flooring_adds_a_psd_part_and_is_idempotent(
        (d, c, cols) in gradient_set(),
        floor in 0.0f64..2.0,
        batch in 1usize..5,
    ) {
        let g = GradientMatrix::new(d, cols, c).unwrap();
        let m = estimate_mean_cov(&g, batch, None).unwrap();
        let (f, delta) = floor_eigenvalues(&m, floor).unwrap();
        prop_assert!(delta.eigvals.iter().all(|&x| x >= 0.0));
        let diff = f.covariance().sub(&m.covariance()).sub(&delta.covariance());
        prop_assert!(diff.max_abs() <= 1e-12 * (1.0 + floor + m.lambda_max()));
        let (ff, _) = floor_eigenvalues(&f, floor).unwrap();
        prop_assert_eq!(&ff.eigvals, &f.eigvals);
    }

    #[test]
    fn renyi_non_decreasing_in_alpha(
        (s1, s2) in (1usize..4).prop_flat_map(|d| (spd(d), spd(d))),
        shift in vec_in(3, 1.0),
    ) {
        let d = s1.rows();
        let p = CovarianceModel::from_covariance(vec![0.0; d], &s1).unwrap();
        let q = CovarianceModel::from_covariance(shift[..d].to_vec(), &s2).unwrap();
        prop_assert!(renyi_gaussian(2.0, &p, &p).unwrap().abs() < 1e-10);
        let mut last = f64::NEG_INFINITY;
        for a in [1.05, 1.2, 1.5, 2.0, 3.0, 5.0] {
            match renyi_gaussian(a, &p, &q) {
                Ok(v) => {
                    prop_assert!(v >= last - 1e-9 * v.abs().max(1.0));
                    last = v;
                }
                // Σα stops being positive definite; larger α do too.
                Err(_) => break,
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed(m in spd(3), seed in any::<u64>()) {
        let model = CovarianceModel::from_covariance(vec![0.5, -1.0, 2.0], &m).unwrap();
        let a = sample_gaussian(&model, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        let b = sample_gaussian(&model, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn closed_form_decreases_in_lambda(f1 in 1.01f64..50.0, f2 in 1.01f64..50.0) {
        prop_assume!((f1 - f2).abs() > 1e-6);
        let (p, l1) = high_region(f1);
        let (_, l2) = high_region(f2);
        let e1 = eps_dp_closed_form(l1, &p, ClosedFormMode::General).unwrap();
        let e2 = eps_dp_closed_form(l2, &p, ClosedFormMode::General).unwrap();
        prop_assert_eq!(e1.region, Region::High);
        prop_assert_eq!(f1 < f2, e1.epsilon > e2.epsilon);
    }

    #[test]
    fn low_region_decreases_while_above_one(f1 in 0.01f64..0.9, f2 in 0.01f64..0.9) {
        prop_assume!((f1 - f2).abs() > 1e-6);
        let p = PrivacyParams { clip: 1.0, batch: 1, delta: 1e-6, ..Default::default() };
        // ε = 2C²/(B²λ) > 1 when λ < 2.
        let e1 = eps_dp_closed_form(2.0 * f1, &p, ClosedFormMode::General).unwrap();
        let e2 = eps_dp_closed_form(2.0 * f2, &p, ClosedFormMode::General).unwrap();
        prop_assert_eq!(e1.region, Region::Low);
        prop_assert_eq!(f1 < f2, e1.epsilon > e2.epsilon);
    }

    #[test]
    fn iid_scaling_exact_in_both_regions(n in 1u64..40, k in 2u64..5) {
        let (mut p, l) = high_region(1.5);
        p.ns_users = n;
        let a = eps_dp_closed_form(l, &p, ClosedFormMode::Iid).unwrap();
        p.ns_users = n * k;
        let b = eps_dp_closed_form(l, &p, ClosedFormMode::Iid).unwrap();
        prop_assert!((a.epsilon / b.epsilon - (k as f64).sqrt()).abs() < 1e-9);

        let mut q = PrivacyParams { clip: 1.0, batch: 1, delta: 1e-6, ns_users: n, ..Default::default() };
        let lam = 0.01 / (n * k) as f64;
        let a = eps_dp_closed_form(lam, &q, ClosedFormMode::Iid).unwrap();
        q.ns_users = n * k;
        let b = eps_dp_closed_form(lam, &q, ClosedFormMode::Iid).unwrap();
        prop_assert_eq!(b.region, Region::Low);
        prop_assert!(b.epsilon > 1.0);
        prop_assert!((a.epsilon / b.epsilon - k as f64).abs() < 1e-9);
    }

    #[test]
    fn rdp_bounds_decrease_in_users_and_floor(
        alpha in 1.1f64..8.0,
        n in 2u64..60,
        sigma2 in 0.01f64..1.0,
        bump in 1.01f64..3.0,
    ) {
        let base = PrivacyParams { clip: 1.0, batch: 10, local_size: 100, ns_users: n, floor: sigma2, ..Default::default() };
        for v in [RdpVariant::WfdpA, RdpVariant::WfdpB] {
            let Ok(b0) = rdp_bound(alpha, &base, v, RdpContext::Floor) else { continue };
            let more_users = PrivacyParams { ns_users: n + 1, ..base };
            let more_floor = PrivacyParams { floor: sigma2 * bump, ..base };
            prop_assert!(rdp_bound(alpha, &more_users, v, RdpContext::Floor).unwrap() < b0);
            prop_assert!(rdp_bound(alpha, &more_floor, v, RdpContext::Floor).unwrap() < b0);
        }
    }

    #[test]
    fn subsampling_never_increases_epsilon(eps in 0.0f64..10.0, q in 0.001f64..1.0) {
        let a = amplify_subsampling(eps, q);
        prop_assert!(a <= eps);
        if eps > 1e-9 && q < 0.999 {
            prop_assert!(a < eps);
        }
        prop_assert_eq!(amplify_subsampling(eps, 1.0), eps);
        prop_assert_eq!(amplify_subsampling(0.0, q), 0.0);
    }

    #[test]
    fn simple_composition_additive_and_order_free(
        factors in prop::collection::vec(1.01f64..20.0, 1..12),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (p, l) = high_region(1.0);
        let route = Route::ClosedForm(ClosedFormMode::General);
        let build = |fs: &[f64]| {
            let mut led = RoundLedger::default();
            for (i, f) in fs.iter().enumerate() {
                led.push(account_round(i as u64 + 1, l * f, &p, route).unwrap()).unwrap();
            }
            led
        };
        let led = build(&factors);
        let direct: f64 = factors
            .iter()
            .map(|f| eps_dp_closed_form(l * f, &p, ClosedFormMode::General).unwrap().epsilon)
            .sum();
        let total = compose(&led, CompositionMode::Simple, p.delta).unwrap().epsilon;
        prop_assert!((total - direct).abs() <= 1e-12 * direct);
        let mut shuffled = factors.clone();
        shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let t2 = compose(&build(&shuffled), CompositionMode::Simple, p.delta).unwrap().epsilon;
        prop_assert!((t2 - total).abs() <= 1e-12 * total);
    }

    #[test]
    fn water_filling_never_exceeds_isotropic(eig in prop::collection::vec(0.0f64..2.0, 1..40), floor in 0.001f64..1.0) {
        let d = eig.len() as f64;
        let t = water_filling_trace(&eig, floor);
        prop_assert!(t <= d * floor);
        // Strict once an eigenvalue is visible at the precision of d·σ².
        if eig.iter().any(|&l| l > 1e-12 * d * floor) {
            prop_assert!(t < d * floor);
        }
        prop_assert_eq!(water_filling_trace(&vec![0.0; eig.len()], floor), d * floor);
    }

    #[test]
    fn clipping_idempotent_and_lipschitz_in_c(g in vec_in(6, 5.0), c1 in 0.01f64..4.0, c2 in 0.01f64..4.0) {
        let a = clip_gradient(&g, c1).unwrap();
        prop_assert_eq!(&clip_gradient(&a, c1).unwrap(), &a);
        let b = clip_gradient(&g, c2).unwrap();
        prop_assert!(linalg::norm(&linalg::sub_vec(&a, &b)) <= (c1 - c2).abs() * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn substitution_moves_means_by_bounded_amounts(
        (d, c, cols) in gradient_set(),
        repl in vec_in(5, 4.0),
        j in any::<prop::sample::Index>(),
        batch in 1usize..4,
    ) {
        let g = GradientMatrix::new(d, cols.clone(), c).unwrap();
        let j = j.index(cols.len());
        let new = clip_gradient(&repl[..d], c).unwrap();
        let g2 = g.with_replaced(j, new.clone()).unwrap();
        let m1 = estimate_mean_cov(&g, 1, None).unwrap();
        let m2 = estimate_mean_cov(&g2, 1, None).unwrap();
        let dsize = cols.len() as f64;
        prop_assert!(linalg::norm(&linalg::sub_vec(&m1.mean, &m2.mean)) <= 2.0 * c / dsize * (1.0 + 1e-12));
        // Mean of a batch of B drawn examples with one of them replaced.
        let b = batch.min(cols.len());
        let pick: Vec<&Vec<f64>> = (0..b).map(|k| &cols[(j + k) % cols.len()]).collect();
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d];
        for (k, col) in pick.iter().enumerate() {
            linalg::axpy(&mut s1, 1.0 / b as f64, col);
            linalg::axpy(&mut s2, 1.0 / b as f64, if k == 0 { &new } else { col });
        }
        prop_assert!(linalg::norm(&linalg::sub_vec(&s1, &s2)) <= 2.0 * c / b as f64 * (1.0 + 1e-12));
    }

    #[test]
    fn span_test_ignores_column_scaling(
        (d, c, cols) in gradient_set(),
        scales in prop::collection::vec(prop_oneof![0.1f64..10.0, -10.0f64..-0.1], 12),
        v in vec_in(5, 1.0),
    ) {
        let g = GradientMatrix::new(d, cols.clone(), c).unwrap();
        let scaled: Vec<Vec<f64>> = cols.iter().zip(&scales).map(|(col, s)| col.iter().map(|x| x * s).collect()).collect();
        let g2 = GradientMatrix::new(d, scaled, 10.0 * c).unwrap();
        let target = &v[..d];
        prop_assert_eq!(
            check_necessary_condition(&[g.clone()], target, SPAN_TOL).unwrap(),
            check_necessary_condition(&[g2.clone()], target, SPAN_TOL).unwrap()
        );
        prop_assert_eq!(
            check_necessary_condition(&[g], &cols[0], SPAN_TOL).unwrap(),
            check_necessary_condition(&[g2], &cols[0], SPAN_TOL).unwrap()
        );
    }

    #[test]
    fn aggregation_is_linear(
        xs in prop::collection::vec(vec_in(4, 100.0), 1..8),
        offsets in prop::collection::vec(vec_in(4, 100.0), 8),
        seed in any::<u64>(),
    ) {
        let n = xs.len();
        let plain: Vec<(u64, Vec<f64>)> = xs.iter().cloned().enumerate().map(|(i, x)| (i as u64, x)).collect();
        let shifted: Vec<(u64, Vec<f64>)> = xs
            .iter()
            .zip(&offsets)
            .enumerate()
            .map(|(i, (x, c))| (i as u64, x.iter().zip(c).map(|(a, b)| a + b).collect()))
            .collect();
        let a = secure_aggregate(&plain, seed, 1).unwrap();
        let b = secure_aggregate(&shifted, seed, 2).unwrap();
        let q = 2f64.powi(-17);
        for k in 0..4 {
            let sum_c: f64 = offsets[..n].iter().map(|c| c[k]).sum();
            prop_assert!((b[k] - a[k] - sum_c).abs() <= 3.0 * n as f64 * q);
        }
    }
}
