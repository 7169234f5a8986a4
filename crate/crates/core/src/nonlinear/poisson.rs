//! Poisson rates with a gamma baseline prior.
//!
//! Candidate sets interpolate between the equal-tailed gamma posterior
//! credible interval (`chi = 0`) and the Garwood interval (`chi -> inf`).

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{check_alpha, Error, Result};
use crate::lp::{invert_chi, solve_rho_g, GeneralMomentProblem, InvertOptions};
use crate::special::{gamma_quantile, poisson_pmf};

#[derive(Debug, Clone)]
pub struct PoissonConfig {
    /// Gamma shape.
    pub k: f64,
    /// Gamma scale.
    pub lambda: f64,
    pub alpha: f64,
    /// Largest count included in sums over `Y`.
    pub y_max: u32,
    pub theta_grid: Vec<f64>,
}

impl PoissonConfig {
    pub fn new(k: f64, lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        let top = -lambda * 0.001_f64.ln();
        let grid = (0..500).map(|i| 1e-6 + (top - 1e-6) * i as f64 / 499.0).collect();
        Self::with_grid(k, lambda, alpha, 30, grid)
    }

    pub fn with_grid(k: f64, lambda: f64, alpha: f64, y_max: u32, theta_grid: Vec<f64>) -> Result<Self> {
        check_alpha(alpha)?;
        if !(k > 0.0 && k.is_finite() && lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("need k > 0 and lambda > 0, got {k}, {lambda}")));
        }
        if y_max < 10 {
            return Err(Error::InvalidArgument(format!("y_max must be at least 10, got {y_max}")));
        }
        if theta_grid.is_empty() || theta_grid[0] <= 0.0 || theta_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("theta grid must be positive and strictly increasing".into()));
        }
        Ok(Self { k, lambda, alpha, y_max, theta_grid })
    }

    /// Baseline `(E[theta], E[theta^2])`.
    pub fn baseline_moments(&self) -> (f64, f64) {
        (self.k * self.lambda, self.k * (self.k + 1.0) * self.lambda * self.lambda)
    }
}

fn quantile_or_zero(p: f64, shape: f64, scale: f64) -> f64 {
    if shape <= 0.0 {
        0.0
    } else {
        gamma_quantile(p, shape, scale)
    }
}

/// Candidate set `S(y; chi)`.
pub fn poisson_candidate_set(y: u32, cfg: &PoissonConfig, chi: f64) -> (f64, f64) {
    let e = (-chi).exp();
    let yf = y as f64;
    let scale = cfg.lambda / (e + cfg.lambda);
    let lo = quantile_or_zero(cfg.alpha / 2.0, e * cfg.k + yf, scale);
    let hi = quantile_or_zero(1.0 - cfg.alpha / 2.0, 1.0 + e * (cfg.k - 1.0) + yf, scale);
    (lo, hi)
}

/// Exact (Garwood) interval for a Poisson mean.
pub fn garwood_ci(y: u32, alpha: f64) -> (f64, f64) {
    let yf = y as f64;
    let lo = if y == 0 { 0.0 } else { gamma_quantile(alpha / 2.0, yf, 1.0) };
    (lo, gamma_quantile(1.0 - alpha / 2.0, yf + 1.0, 1.0))
}

fn candidate_sets(cfg: &PoissonConfig, chi: f64) -> Vec<(f64, f64)> {
    (0..=cfg.y_max).map(|y| poisson_candidate_set(y, cfg, chi)).collect()
}

fn noncoverage_with_sets(theta: f64, sets: &[(f64, f64)]) -> f64 {
    let cover: f64 = sets
        .iter()
        .enumerate()
        .filter(|(_, &(lo, hi))| lo <= theta && theta <= hi)
        .map(|(y, _)| poisson_pmf(y as u32, theta))
        .sum();
    (1.0 - cover).clamp(0.0, 1.0)
}

/// `1 - sum_{y <= y_max} P(Y = y | theta) 1{theta in S(y; chi)}`.
pub fn poisson_noncoverage(theta: f64, chi: f64, cfg: &PoissonConfig) -> f64 {
    noncoverage_with_sets(theta, &candidate_sets(cfg, chi))
}

fn moment_problem(cfg: &PoissonConfig, chi: f64, m1: f64, m2: f64) -> Result<GeneralMomentProblem> {
    let sets = candidate_sets(cfg, chi);
    let reward = cfg.theta_grid.par_iter().map(|&t| noncoverage_with_sets(t, &sets)).collect();
    GeneralMomentProblem::from_fns(cfg.theta_grid.clone(), reward, &[&|t| t, &|t| t * t], vec![m1, m2])
}

/// Worst-case non-coverage given `E[theta] = m1` and `E[theta^2] = m2`.
pub fn worst_case_noncoverage(cfg: &PoissonConfig, chi: f64, m1: f64, m2: f64) -> Result<f64> {
    Ok(solve_rho_g(&moment_problem(cfg, chi, m1, m2)?)?.value)
}

/// Robust `chi` under the two moment constraints.
pub fn poisson_ebci(cfg: &PoissonConfig, m1: f64, m2: f64) -> Result<f64> {
    if !(m1 > 0.0 && m2 >= m1 * m1) {
        return Err(Error::Infeasible(format!(
            "moments E[theta] = {m1}, E[theta^2] = {m2} do not fit a positive distribution"
        )));
    }
    let opts = InvertOptions { tol: 1e-5, ..InvertOptions::default() };
    invert_chi(|chi| moment_problem(cfg, chi, m1, m2), cfg.alpha, opts)
}

/// Negative binomial marginal `P(Y = y)` under the gamma baseline.
pub fn marginal_pmf(y: u32, k: f64, lambda: f64) -> f64 {
    let yf = y as f64;
    let ln = ln_gamma(k + yf) - ln_gamma(k) - ln_gamma(yf + 1.0) + yf * (lambda / (1.0 + lambda)).ln()
        - k * (1.0 + lambda).ln();
    ln.exp()
}

/// Average length of the candidate set under the baseline marginal.
pub fn average_length(cfg: &PoissonConfig, chi: f64) -> f64 {
    (0..=cfg.y_max)
        .map(|y| {
            let (lo, hi) = poisson_candidate_set(y, cfg, chi);
            marginal_pmf(y, cfg.k, cfg.lambda) * (hi - lo)
        })
        .sum()
}

/// Average Garwood length under the baseline marginal.
pub fn garwood_average_length(cfg: &PoissonConfig) -> f64 {
    (0..=cfg.y_max)
        .map(|y| {
            let (lo, hi) = garwood_ci(y, cfg.alpha);
            marginal_pmf(y, cfg.k, cfg.lambda) * (hi - lo)
        })
        .sum()
}

/// Average non-coverage when `theta` follows the gamma baseline.
pub fn baseline_noncoverage(cfg: &PoissonConfig, chi: f64) -> f64 {
    // sum over y of m(y) P(theta notin S(y) | y), with gamma posterior shape k+y, scale lambda/(1+lambda)
    let scale = cfg.lambda / (1.0 + cfg.lambda);
    let cover: f64 = (0..=cfg.y_max)
        .map(|y| {
            let (lo, hi) = poisson_candidate_set(y, cfg, chi);
            let shape = cfg.k + y as f64;
            let p = crate::special::gamma_p(shape, hi / scale) - crate::special::gamma_p(shape, lo / scale);
            marginal_pmf(y, cfg.k, cfg.lambda) * p
        })
        .sum();
    1.0 - cover
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Gamma};

    #[test]
    fn garwood_boundaries_and_monotone() {
        assert_eq!(garwood_ci(0, 0.05).0, 0.0);
        let mut prev = 0.0;
        for y in 0..50 {
            let (lo, hi) = garwood_ci(y, 0.05);
            assert!(lo < hi && hi > prev);
            prev = hi;
        }
    }

    #[test]
    fn garwood_exact_coverage() {
        for &theta in &[0.1, 0.5, 1.0, 5.0] {
            let cover: f64 = (0..=200u32)
                .filter(|&y| {
                    let (lo, hi) = garwood_ci(y, 0.05);
                    lo <= theta && theta <= hi
                })
                .map(|y| poisson_pmf(y, theta))
                .sum();
            assert!(cover >= 0.95, "theta {theta} cover {cover}");
        }
    }

    #[test]
    fn chi_zero_is_gamma_credible_interval() {
        let cfg = PoissonConfig::new(1.0, 0.3, 0.05).unwrap();
        for y in [0u32, 1, 4, 12] {
            let (lo, hi) = poisson_candidate_set(y, &cfg, 0.0);
            // statrs parametrizes by rate
            let post = Gamma::new(1.0 + y as f64, (1.0 + 0.3) / 0.3).unwrap();
            assert_abs_diff_eq!(lo, post.inverse_cdf(0.025), epsilon = 1e-8);
            assert_abs_diff_eq!(hi, post.inverse_cdf(0.975), epsilon = 1e-8);
        }
    }

    #[test]
    fn large_chi_converges_to_garwood() {
        let cfg = PoissonConfig::new(1.0, 1.0, 0.05).unwrap();
        let (lo, hi) = poisson_candidate_set(3, &cfg, 50.0);
        let (glo, ghi) = garwood_ci(3, 0.05);
        assert_abs_diff_eq!(lo, glo, epsilon = 1e-6);
        assert_abs_diff_eq!(hi, ghi, epsilon = 1e-6);
    }

    #[test]
    fn width_nondecreasing_in_chi() {
        let cfg = PoissonConfig::new(2.0, 0.5, 0.05).unwrap();
        for y in [0u32, 2, 7] {
            let mut prev = 0.0;
            for i in 0..40 {
                let (lo, hi) = poisson_candidate_set(y, &cfg, 0.2 * i as f64);
                assert!(hi - lo >= prev - 1e-12);
                prev = hi - lo;
            }
        }
    }

    #[test]
    fn marginal_sums_to_one() {
        let s: f64 = (0..400).map(|y| marginal_pmf(y, 1.7, 0.8)).sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exponential_baseline_moments() {
        let cfg = PoissonConfig::new(1.0, 0.4, 0.05).unwrap();
        let (m1, m2) = cfg.baseline_moments();
        assert_abs_diff_eq!(m1, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(m2, 2.0 * 0.16, epsilon = 1e-15);
    }

    #[test]
    fn parametric_set_has_nominal_baseline_coverage() {
        // equal-tailed credible sets cover with probability 1 - alpha under the prior
        let cfg = PoissonConfig::with_grid(1.0, 0.3, 0.05, 60, vec![1.0]).unwrap();
        assert_abs_diff_eq!(baseline_noncoverage(&cfg, 0.0), 0.05, epsilon = 1e-9);
    }
}
