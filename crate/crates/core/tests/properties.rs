use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use uvi_core::dist::{chi2_cdf, chi2_quantile, ks_statistic};
use uvi_core::estimators::*;
use uvi_core::inference::*;
use uvi_core::linalg::relative_char_poly;
use uvi_core::model::*;
use uvi_core::quantiles::{compute_g, QuantileSession};

/// Orthogonal eigenbasis, so moment matrices stay well conditioned.
fn stable_gamma(d: usize, seed: u64) -> DMatrix<f64> {
    let eig = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 0.9 - 0.25 * i as f64));
    let q = random_orthogonal(d, seed);
    &q * eig * q.transpose()
}

fn sample(gamma: DMatrix<f64>, n: usize, seed: u64) -> VarPath {
    let d = gamma.nrows();
    simulate_var(&ModelParams::new(gamma, equicorrelated_sigma(d)).unwrap(), n, &ErrorSpec::Gaussian, seed).unwrap()
}

fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut r = uvi_core::rng::stream(seed, "rotation", &[]);
    let m = DMatrix::from_fn(d, d, |_, _| r.random::<f64>() - 0.5);
    m.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simulation_is_deterministic_and_shaped(d in 1usize..4, n in 10usize..60, seed in any::<u64>()) {
        let g = stable_gamma(d, seed);
        let a = sample(g.clone(), n, seed);
        let b = sample(g, n, seed);
        prop_assert_eq!(a.data().shape(), (n, d));
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn constructed_gamma_has_requested_spectrum(d in 1usize..6, n in 20usize..200, seed in any::<u64>()) {
        let eig = staggered_spectrum(d, n);
        let (g, _) = construct_gamma_from_spectrum(&eig, seed).unwrap();
        for &l in &eig {
            prop_assert!(relative_char_poly(&g, Complex64::new(l, 0.0)) < 1e-6);
        }
    }

    #[test]
    fn eigenvalue_region_is_monotone_on_the_real_line(alpha in 0.001f64..0.5) {
        let grid: Vec<f64> = (1..=1000).map(|k| k as f64 / 1000.0).collect();
        let first = grid.iter().position(|&l| check_eigenvalue_region(Complex64::new(l, 0.0), alpha));
        if let Some(i) = first {
            for &l in &grid[i..] {
                prop_assert!(check_eigenvalue_region(Complex64::new(l, 0.0), alpha), "λ = {l}");
            }
        }
    }

    #[test]
    fn t2_vanishes_only_at_the_estimate(d in 1usize..4, seed in any::<u64>()) {
        let p = sample(stable_gamma(d, seed), 80, seed);
        let fit = ols_estimate(&p).unwrap();
        prop_assert!(fit.t2(&fit.gamma_hat).unwrap().abs() < 1e-10);
        let mut other = fit.gamma_hat.clone();
        other[(0, 0)] += 1e-3;
        prop_assert!(fit.t2(&other).unwrap() > 0.0);
    }

    #[test]
    fn t2_is_rotation_invariant(d in 2usize..4, seed in any::<u64>()) {
        let p = sample(stable_gamma(d, seed), 80, seed);
        let q = random_orthogonal(d, seed);
        let rotated = VarPath::new(p.data() * q.transpose()).unwrap();
        let g0 = stable_gamma(d, seed ^ 7);
        let a = t2_stat(&p, &g0).unwrap();
        let b = t2_stat(&rotated, &(&q * &g0 * q.transpose())).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn la_wald_is_nonnegative(d in 1usize..4, seed in any::<u64>()) {
        let p = sample(stable_gamma(d, seed), 60, seed);
        let fit = lag_augmented_estimate(&p).unwrap();
        let a = coordinate_selector(d, &[(0, 0)]);
        prop_assert!(fit.wald(&a, &DVector::from_element(1, 0.3)).unwrap() >= 0.0);
    }

    #[test]
    fn ivx_instrument_reconstructs(d in 1usize..4, beta in 0.5f64..0.99, seed in any::<u64>()) {
        let p = sample(stable_gamma(d, seed), 60, seed);
        let fit = ivx_estimate(&p, beta).unwrap();
        let z = ivx_instrument(&p, beta);
        prop_assert!((&z - &fit.z_path).amax() <= 1e-12);
    }

    #[test]
    fn estimators_are_pure(seed in any::<u64>()) {
        let p = sample(stable_gamma(2, seed), 50, seed);
        prop_assert_eq!(ols_estimate(&p).unwrap().gamma_hat, ols_estimate(&p).unwrap().gamma_hat);
        prop_assert_eq!(lag_augmented_estimate(&p).unwrap().gamma_la, lag_augmented_estimate(&p).unwrap().gamma_la);
        prop_assert_eq!(ivx_estimate(&p, 0.9).unwrap().gamma_iv, ivx_estimate(&p, 0.9).unwrap().gamma_iv);
    }

    #[test]
    fn quantiles_are_monotone_in_level(seed in any::<u64>(), d in 1usize..3) {
        let s = QuantileSession::with_cache(seed, 99, 40, d, None).unwrap();
        let g = stable_gamma(d, seed);
        let levels = [0.5, 0.8, 0.9, 0.95, 0.99];
        let q = s.quantiles(&g, &equicorrelated_sigma(d), &levels).unwrap();
        for w in q.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn g_is_symmetric(c1 in -30.0f64..0.0, c2 in -30.0f64..0.0, c3 in -30.0f64..0.0) {
        let g = compute_g(&[c1, c2, c3], &equicorrelated_sigma(3)).unwrap();
        prop_assert!((&g - g.transpose()).amax() <= 1e-12 * g.amax());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn regions_are_nested_in_level(seed in any::<u64>()) {
        let p = sample(stable_gamma(2, seed), 60, seed);
        let quantile = QuantileConfig { replications: 99, seed, ..QuantileConfig::default() };
        for method in [RegionMethod::Iv, RegionMethod::B] {
            let wide = Region::new(&p, &RegionSpec::new(method, 0.01).with_quantile(quantile.clone())).unwrap();
            let narrow = Region::new(&p, &RegionSpec::new(method, 0.2).with_quantile(quantile.clone())).unwrap();
            for k in 0..10 {
                let g0 = &wide.whitening.center + DMatrix::from_fn(2, 2, |i, j| 0.03 * (((k + i + 2 * j) % 5) as f64 - 2.0));
                // Strongly explosive candidates have no simulated quantile; nesting is vacuous there.
                if let (Ok(true), wide_in) = (narrow.contains(&g0), wide.contains(&g0)) {
                    prop_assert!(wide_in.unwrap());
                }
            }
        }
    }

    #[test]
    fn iv_projection_contains_the_iv_estimate(seed in any::<u64>()) {
        let p = sample(stable_gamma(2, seed), 60, seed);
        let ci = project_ci(&p, (0, 1), &RegionSpec::new(RegionMethod::Iv, 0.05), &Default::default()).unwrap();
        let est = ivx_estimate(&p, 0.9).unwrap().gamma_iv[(0, 1)];
        prop_assert!(ci.contains(est));
    }
}

#[test]
fn short_circuit_forces_no_rejection() {
    let gamma = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.1, 0.5]);
    for seed in 0..10 {
        let p = sample(gamma.clone(), 100, seed);
        let reg = ConditionalRegression::new(&p).unwrap();
        let sub = p.columns(&[1, 2]).unwrap();
        let region = Region::new(&sub, &RegionSpec::new(RegionMethod::Iv, 0.05)).unwrap();
        let crit = chi2_quantile(2, 0.95).unwrap();
        let q = chi2_quantile(4, 0.95).unwrap();
        let found_low = (0..20).any(|k| {
            let z: Vec<f64> = (0..4).map(|i| ((k * 4 + i) as f64 * 0.7).sin() * (q / 4.0).sqrt()).collect();
            reg.null_statistic(&region.whitening.gamma_at(&z)) <= crit
        });
        let r = pr_test(&p, 0.05, 0.05, PrMethod::Iv, &PrTestOptions::default()).unwrap();
        if found_low {
            assert!(!r.reject, "seed {seed}");
        }
    }
}

#[test]
fn conditional_statistic_is_chi_square_at_the_truth() {
    let gamma = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.95]);
    let truth = DMatrix::from_element(1, 1, 0.95);
    let samples: Vec<f64> = (0..2000)
        .map(|seed| ConditionalRegression::new(&sample(gamma.clone(), 500, seed)).unwrap().null_statistic(&truth))
        .collect();
    let ks = ks_statistic(&samples, |x| chi2_cdf(1, x));
    assert!(ks < 0.07, "KS {ks}");
}
