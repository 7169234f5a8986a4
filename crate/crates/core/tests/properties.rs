use ebci::ebci::{fit, robust_ebci, CvaCache, FitOptions, Method};
use ebci::lp::{default_t_grid, solve_rho_g, GeneralMomentProblem};
use ebci::moments::{fplib_b, moments_uc, pmt, wls_delta, UnitRecord};
use ebci::nonlinear::soft_threshold::soft_threshold_noncoverage;
use ebci::nonlinear::{
    garwood_ci, hpd_interval, poisson_candidate_set, selection_noncoverage, PoissonConfig, SelectionWindow, SoftThresholdConfig,
};
use ebci::rho::{cva_chi, CVA_TOL, least_favorable, r, r0, r0_derivs, rho, rho_fourth, rho_second, t0, MomentConstraints};
use ebci::special::z_crit;
use proptest::prelude::*;

fn log_uniform(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo.ln()..hi.ln()).prop_map(f64::exp)
}

proptest! {
    #[test]
    fn r_symmetric_and_monotone(b in 0.0..8.0f64, db in 0.0..2.0f64, chi in 0.0..6.0f64, dchi in 0.0..2.0f64) {
        prop_assert_eq!(r(b, chi), r(-b, chi));
        prop_assert!(r(b + db, chi) >= r(b, chi) - 1e-15);
        prop_assert!(r(b, chi + dchi) <= r(b, chi) + 1e-15);
    }

    #[test]
    fn majorant_dominates_and_is_concave(m2 in log_uniform(1e-3, 100.0), h in 0.01..5.0f64, chi in 0.5..6.0f64) {
        let v = rho_second(m2, chi);
        prop_assert!(v >= r0(m2, chi) - 1e-12);
        let (a, b) = (m2, m2 + 2.0 * h);
        prop_assert!(rho_second(m2 + h, chi) >= 0.5 * (rho_second(a, chi) + rho_second(b, chi)) - 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences(t in 0.01..50.0f64, chi in 0.5..6.0f64) {
        let d = r0_derivs(t, chi);
        let h = 1e-5 * t.max(0.1);
        let fd1 = (r0(t + h, chi) - r0(t - h, chi)) / (2.0 * h);
        let fd2 = (r0_derivs(t + h, chi).d1 - r0_derivs(t - h, chi).d1) / (2.0 * h);
        prop_assert!((d.d1 - fd1).abs() <= 1e-6 * d.d1.abs() + 1e-10, "{} vs {}", d.d1, fd1);
        prop_assert!((d.d2 - fd2).abs() <= 1e-6 * d.d2.abs() + 1e-10, "{} vs {}", d.d2, fd2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fourth_moment_bound_is_sandwiched(m2 in log_uniform(1e-2, 50.0), kappa in 1.0..30.0f64, chi in 1.0..6.0f64) {
        let v = rho_fourth(m2, kappa, chi).unwrap();
        prop_assert!(v >= r0(m2, chi) - 1e-12);
        prop_assert!(v <= rho_second(m2, chi) + 1e-12);
    }

    #[test]
    fn least_favorable_attains(m2 in log_uniform(1e-2, 50.0), kappa in prop::option::of(1.0..30.0f64), chi in 1.0..6.0f64) {
        let c = MomentConstraints::new(m2, kappa).unwrap();
        let lf = least_favorable(&c, chi).unwrap();
        prop_assert!((lf.expect(|t| r0(t, chi)) - rho(&c, chi).unwrap()).abs() <= 1e-6);
        prop_assert!((lf.expect(|t| t) - m2).abs() <= 1e-8 * m2.max(1.0));
    }

    #[test]
    fn cva_monotone_and_fixed_point(m2 in log_uniform(1e-3, 100.0), f in 1.0..3.0f64, kappa in prop::option::of(1.0..30.0f64)) {
        let c = MomentConstraints::new(m2, kappa).unwrap();
        let a = cva_chi(&c, 0.05).unwrap();
        let b = cva_chi(&MomentConstraints::new(m2 * f, kappa).unwrap(), 0.05).unwrap();
        prop_assert!(b >= a - CVA_TOL);
        prop_assert!(a >= z_crit(0.05) - 1e-9);
        prop_assert!((rho(&c, a).unwrap() - 0.05).abs() <= 1e-5);
    }

    #[test]
    fn interval_lengths_are_ordered(w in 0.02..0.98f64, kappa in 3.0..30.0f64) {
        // unshrunk >= robust(mu2) >= robust(mu2, kappa) >= parametric, in units of sigma
        let z = z_crit(0.05);
        let m2 = 1.0 / w - 1.0;
        let only = cva_chi(&MomentConstraints::second_only(m2).unwrap(), 0.05).unwrap() * w;
        let both = cva_chi(&MomentConstraints::new(m2, Some(kappa)).unwrap(), 0.05).unwrap() * w;
        prop_assert!(z >= only - 1e-9);
        prop_assert!(only >= both - CVA_TOL);
        prop_assert!(both >= z * w.sqrt() - 1e-6);
    }

    #[test]
    fn lp_refinement_and_duality(m2 in log_uniform(0.05, 20.0), chi in 1.0..5.0f64) {
        let solve = |k: usize| {
            let grid = default_t_grid(m2, 0.0, k);
            let reward: Vec<f64> = grid.iter().map(|&t| r0(t, chi)).collect();
            let p = GeneralMomentProblem::from_fns(grid.clone(), reward.clone(), &[&|t| t], vec![m2]).unwrap();
            (solve_rho_g(&p).unwrap(), grid, reward)
        };
        let (coarse, _, _) = solve(200);
        let (fine, grid, reward) = solve(400);
        prop_assert!(fine.value >= coarse.value - 1e-6);
        for (x, rw) in grid.iter().zip(&reward) {
            prop_assert!(fine.duals[0] + fine.duals[1] * x >= rw - 1e-6);
        }
        let (again, _, _) = solve(400);
        prop_assert_eq!(again.value, fine.value);
    }
}

fn units_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-5.0..5.0f64, 0.2..3.0f64), 12..40)
}

fn to_units(v: &[(f64, f64)]) -> Vec<UnitRecord> {
    let n = v.len() as f64;
    v.iter().map(|&(y, s)| UnitRecord::simple(y, s, 1.0 / n).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncated_moments_are_admissible(v in units_strategy()) {
        let u = to_units(&v);
        let delta = wls_delta(&u).unwrap();
        let (mu2, kappa) = pmt(&u, &moments_uc(&u, &delta).unwrap()).unwrap();
        prop_assert!(mu2 > 0.0 && kappa > 1.0);
    }

    #[test]
    fn flat_prior_mean_exceeds_estimate(m in -10.0..10.0f64, var in log_uniform(1e-3, 10.0)) {
        prop_assert!(fplib_b(m, var) >= m);
    }

    #[test]
    fn uc_moments_scale(v in units_strategy(), c in 0.1..10.0f64) {
        let u = to_units(&v);
        let scaled: Vec<UnitRecord> = u.iter().map(|x| UnitRecord::simple(c * x.y, c * x.sigma, x.omega).unwrap()).collect();
        let a = moments_uc(&u, &wls_delta(&u).unwrap()).unwrap();
        let b = moments_uc(&scaled, &wls_delta(&scaled).unwrap()).unwrap();
        prop_assert!((b.mu2 - c * c * a.mu2).abs() <= 1e-9 * (c * c * a.mu2).abs().max(1e-9));
        if a.mu2.abs() > 1e-6 {
            let (ka, kb) = (a.mu4 / (a.mu2 * a.mu2), b.mu4 / (b.mu2 * b.mu2));
            prop_assert!((ka - kb).abs() <= 1e-8 * ka.abs().max(1.0));
        }
    }

    #[test]
    fn robust_interval_contains_estimate(y in -5.0..5.0f64, s in 0.2..3.0f64, mu2 in 0.05..5.0f64, kappa in 1.0..20.0f64) {
        let cache = CvaCache::new(0.05);
        let u = UnitRecord::simple(y, s, 1.0).unwrap();
        let o = robust_ebci(&u, 0.3, mu2, mu2, Some(kappa), Method::RobustMu2Kappa, &cache).unwrap();
        prop_assert!(o.lower <= o.theta_hat && o.theta_hat <= o.upper);
        prop_assert!(o.cva >= z_crit(0.05) - 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fit_is_permutation_equivariant(v in units_strategy(), seed in any::<u64>()) {
        let u = to_units(&v);
        let mut perm: Vec<usize> = (0..u.len()).collect();
        // Fisher-Yates driven by a simple LCG
        let mut state = seed | 1;
        for i in (1..perm.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permuted: Vec<UnitRecord> = perm.iter().map(|&i| u[i].clone()).collect();
        let (a, _) = fit(&u, &FitOptions::default()).unwrap();
        let (b, _) = fit(&permuted, &FitOptions::default()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((a[i].theta_hat - b[k].theta_hat).abs() <= 1e-12 * a[i].theta_hat.abs().max(1.0));
            prop_assert!((a[i].half_length - b[k].half_length).abs() <= 1e-9 * a[i].half_length);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // the sets slide from the posterior towards the exact interval, so they need not be nested
    #[test]
    fn poisson_sets_bracket_and_converge(y in 0u32..40, k in 0.3..5.0f64, lambda in 0.1..3.0f64, chi in 0.0..6.0f64, d in 0.0..2.0f64) {
        let cfg = PoissonConfig::new(k, lambda, 0.05).unwrap();
        let (lo, hi) = poisson_candidate_set(y, &cfg, chi);
        prop_assert!(0.0 <= lo && lo < hi);
        let one = PoissonConfig::new(1.0, lambda, 0.05).unwrap();
        let up = poisson_candidate_set(y, &one, chi).1;
        let up2 = poisson_candidate_set(y, &one, chi + d).1;
        prop_assert!(up2 >= up - 1e-9 * up.max(1.0));
        let (glo, ghi) = garwood_ci(y, 0.05);
        let (flo, fhi) = poisson_candidate_set(y, &cfg, 40.0);
        prop_assert!((flo - glo).abs() <= 1e-6 * ghi && (fhi - ghi).abs() <= 1e-6 * ghi);
    }

    #[test]
    fn hpd_sets_nested_in_chi(y in -6.0..6.0f64, mu2 in 0.05..3.0f64, sigma in 0.3..2.0f64, chi in 0.0..6.0f64, d in 0.0..2.0f64) {
        let cfg = SoftThresholdConfig::new(mu2, sigma, 0.05).unwrap();
        if let Some((lo, hi)) = hpd_interval(y, &cfg, chi) {
            let (lo2, hi2) = hpd_interval(y, &cfg, chi + d).expect("larger level set is nonempty");
            prop_assert!(lo2 <= lo + 1e-12 && hi2 >= hi - 1e-12);
        }
    }

    #[test]
    fn soft_threshold_noncoverage_in_unit_interval(theta in -8.0..8.0f64, chi in 0.0..6.0f64, mu2 in 0.05..3.0f64) {
        let cfg = SoftThresholdConfig::new(mu2, 1.0, 0.05).unwrap();
        let v = soft_threshold_noncoverage(theta, chi, &cfg);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn selection_noncoverage_in_unit_interval(theta in -10.0..10.0f64, chi in 0.0..8.0f64, w in 0.05..0.95f64, a in -3.0..3.0f64, len in 0.1..10.0f64) {
        let window = SelectionWindow::new(a, a + len).unwrap();
        let (v, _) = selection_noncoverage(theta, chi, &window, w, 1.0);
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn t0_is_continuous_at_the_concavity_threshold() {
    assert_eq!(t0(3f64.sqrt()), 0.0);
    assert!(t0(3f64.sqrt() + 1e-6) < 1e-3);
}
