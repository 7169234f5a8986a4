//! Soft thresholding under a Laplace baseline prior.
//!
//! Candidate sets are highest-posterior-density sets `{t : log p(t | Y) + chi >= 0}`.
//! The level is absolute, so for small `chi` the set can be empty; such a set
//! never covers.

use rayon::prelude::*;

use crate::error::{check_alpha, Error, Result};
use crate::lp::{invert_chi, solve_rho_g, GeneralMomentProblem, InvertOptions};
use crate::optimize::{brent_min, brent_root};
use crate::quadrature::integrate;
use crate::special::{ln_erfcx, norm_cdf, z_crit};

#[derive(Debug, Clone)]
pub struct SoftThresholdConfig {
    pub mu2: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub theta_grid: Vec<f64>,
    /// Integrals over `Y` run over `[-y_truncation, y_truncation]`.
    pub y_truncation: f64,
}

impl SoftThresholdConfig {
    pub fn new(mu2: f64, sigma: f64, alpha: f64) -> Result<Self> {
        let grid = (0..500).map(|i| -10.0 + 20.0 * i as f64 / 499.0).collect();
        Self::with_grid(mu2, sigma, alpha, grid, 10.0)
    }

    pub fn with_grid(mu2: f64, sigma: f64, alpha: f64, theta_grid: Vec<f64>, y_truncation: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(mu2 > 0.0 && mu2.is_finite() && sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("need mu2 > 0 and sigma > 0, got {mu2}, {sigma}")));
        }
        if theta_grid.is_empty() || theta_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("theta grid must be strictly increasing".into()));
        }
        if !(y_truncation > 0.0) {
            return Err(Error::InvalidArgument("y truncation must be positive".into()));
        }
        Ok(Self { mu2, sigma, alpha, theta_grid, y_truncation })
    }

    /// Laplace rate `sqrt(2 / mu2)`.
    fn rate(&self) -> f64 {
        (2.0 / self.mu2).sqrt()
    }
}

/// `sign(y) max(|y| - sqrt(2/mu2), 0)`.
pub fn soft_threshold_estimate(y: f64, mu2: f64) -> f64 {
    let thr = (2.0 / mu2).sqrt();
    y.signum() * (y.abs() - thr).max(0.0)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn erfcx_args(y: f64, mu2: f64, sigma: f64) -> (f64, f64) {
    let s = sigma / mu2.sqrt();
    let u = y / (sigma * std::f64::consts::SQRT_2);
    (s - u, s + u)
}

/// Log normalizing constant `c(Y)` of the posterior.
pub fn log_norm_const(y: f64, mu2: f64, sigma: f64) -> f64 {
    let (x1, x2) = erfcx_args(y, mu2, sigma);
    0.5 * (2.0 / (std::f64::consts::PI * sigma * sigma)).ln() - log_sum_exp(ln_erfcx(x1), ln_erfcx(x2))
}

/// `log p(theta | y)` under the Laplace prior with second moment `mu2`.
pub fn posterior_log_density(theta: f64, y: f64, mu2: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    log_norm_const(y, mu2, sigma) - theta * theta / (2.0 * s2) + y * theta / s2 - theta.abs() * (2.0 / mu2).sqrt()
}

/// Log marginal density of `Y` when `theta` is Laplace.
pub fn log_marginal_density(y: f64, mu2: f64, sigma: f64) -> f64 {
    let (x1, x2) = erfcx_args(y, mu2, sigma);
    let a = (2.0 / mu2).sqrt();
    (a / 4.0).ln() - y * y / (2.0 * sigma * sigma) + log_sum_exp(ln_erfcx(x1), ln_erfcx(x2))
}

/// Closed-form HPD set at level `chi`; `None` when no `theta` reaches the level.
pub fn hpd_interval(y: f64, cfg: &SoftThresholdConfig, chi: f64) -> Option<(f64, f64)> {
    let s2 = cfg.sigma * cfg.sigma;
    let a = cfg.rate();
    let c = chi + log_norm_const(y, cfg.mu2, cfg.sigma);
    // theta^2 / (2 s2) - B theta <= c  <=>  theta in s2 [B -+ sqrt(B^2 + 2c/s2)]
    let solve = |b: f64| -> Option<(f64, f64)> {
        let disc = b * b + 2.0 * c / s2;
        if disc < 0.0 {
            return None;
        }
        let r = disc.sqrt();
        Some((s2 * (b - r), s2 * (b + r)))
    };
    let (l1, u1) = solve(y / s2 - a)?;
    let (l2, u2) = solve(y / s2 + a)?;
    let lo = l1.max(l2);
    let hi = u1.min(u2);
    (lo <= hi).then_some((lo, hi))
}

/// Length of the HPD set (zero when empty).
pub fn hpd_length(y: f64, cfg: &SoftThresholdConfig, chi: f64) -> f64 {
    hpd_interval(y, cfg, chi).map_or(0.0, |(lo, hi)| hi - lo)
}

/// Non-coverage `1 - P(theta in S(Y; chi) | theta)` with `Y ~ N(theta, sigma^2)`
/// restricted to the truncation window.
///
/// `theta in S(y)` iff `h(y) = c(y) + y theta / sigma^2` clears a threshold; `h`
/// is concave, so the acceptance region in `y` is an interval found by
/// maximizing `h` and then locating both crossings.
pub fn soft_threshold_noncoverage(theta: f64, chi: f64, cfg: &SoftThresholdConfig) -> f64 {
    let (mu2, sigma) = (cfg.mu2, cfg.sigma);
    let s2 = sigma * sigma;
    let a = cfg.rate();
    let level = theta * theta / (2.0 * s2) + a * theta.abs() - chi;
    let h = |y: f64| log_norm_const(y, mu2, sigma) + y * theta / s2 - level;

    // the maximizer solves E[t | y] = theta, and |E[t | y] - y| <= a s2
    let span = a * s2 + sigma;
    let (ystar, neg_hmax) = brent_min(|y| -h(y), theta - span, theta + span, 1e-12 * (1.0 + theta.abs()));
    if -neg_hmax < 0.0 {
        return 1.0;
    }
    let crossing = |dir: f64| -> f64 {
        let mut step = sigma;
        let mut far = ystar + dir * step;
        while h(far) >= 0.0 {
            step *= 2.0;
            far = ystar + dir * step;
        }
        let (lo, hi) = if dir < 0.0 { (far, ystar) } else { (ystar, far) };
        brent_root(&h, lo, hi, 1e-13 * (1.0 + far.abs())).unwrap_or(0.5 * (lo + hi))
    };
    let lower = crossing(-1.0).max(-cfg.y_truncation);
    let upper = crossing(1.0).min(cfg.y_truncation);
    if upper <= lower {
        return 1.0;
    }
    let cover = norm_interval((lower - theta) / sigma, (upper - theta) / sigma);
    (1.0 - cover).clamp(0.0, 1.0)
}

/// `Phi(b) - Phi(a)` computed in the better-conditioned tail.
pub(crate) fn norm_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        norm_cdf(-a) - norm_cdf(-b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}

/// Non-coverage on every grid point.
pub fn noncoverage_on_grid(cfg: &SoftThresholdConfig, chi: f64) -> Vec<f64> {
    cfg.theta_grid.par_iter().map(|&t| soft_threshold_noncoverage(t, chi, cfg)).collect()
}

fn moment_problem(cfg: &SoftThresholdConfig, chi: f64) -> Result<GeneralMomentProblem> {
    GeneralMomentProblem::from_fns(cfg.theta_grid.clone(), noncoverage_on_grid(cfg, chi), &[&|t| t * t], vec![cfg.mu2])
}

/// Worst-case non-coverage over distributions on the grid with `E[theta^2] = mu2`.
pub fn worst_case_noncoverage(cfg: &SoftThresholdConfig, chi: f64) -> Result<f64> {
    Ok(solve_rho_g(&moment_problem(cfg, chi)?)?.value)
}

/// Average non-coverage when `theta` is Laplace with second moment `mu2`.
pub fn laplace_noncoverage(cfg: &SoftThresholdConfig, chi: f64) -> Result<f64> {
    let b = (cfg.mu2 / 2.0).sqrt();
    // symmetric in theta: E = int_0^inf r(b s) e^{-s} ds
    let q = integrate(|s| soft_threshold_noncoverage(b * s, chi, cfg) * (-s).exp(), 0.0, 40.0, 1e-9, 1e-9)?;
    Ok(q.value)
}

#[derive(Debug, Clone, Copy)]
pub struct SoftThresholdEbci {
    pub chi_robust: f64,
    pub chi_parametric: f64,
}

/// Robust critical value under `E[theta^2] = mu2`.
pub fn robust_chi(cfg: &SoftThresholdConfig) -> Result<f64> {
    let opts = InvertOptions { tol: 1e-5, ..InvertOptions::default() };
    invert_chi(|chi| moment_problem(cfg, chi), cfg.alpha, opts)
}

/// `chi` solving `E_Laplace[r(theta, chi)] = alpha`.
pub fn parametric_chi(cfg: &SoftThresholdConfig) -> Result<f64> {
    let f = |chi: f64| laplace_noncoverage(cfg, chi).map(|v| v - cfg.alpha);
    if f(0.0)? <= 0.0 {
        return Ok(0.0);
    }
    let mut hi = 2.0;
    while f(hi)? > 0.0 {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::Calibration("parametric soft-threshold chi not bracketed".into()));
        }
    }
    let mut err = None;
    let root = brent_root(
        |chi| match f(chi) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        },
        0.0,
        hi,
        1e-8,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(root),
    }
}

pub fn soft_threshold_ebci(cfg: &SoftThresholdConfig) -> Result<SoftThresholdEbci> {
    Ok(SoftThresholdEbci { chi_robust: robust_chi(cfg)?, chi_parametric: parametric_chi(cfg)? })
}

/// Expected HPD length when `theta` is Laplace, divided by the unshrunk length
/// `2 z sigma`.
pub fn relative_expected_length(cfg: &SoftThresholdConfig, chi: f64) -> Result<f64> {
    let t = cfg.y_truncation;
    let q = integrate(
        |y| log_marginal_density(y, cfg.mu2, cfg.sigma).exp() * hpd_length(y, cfg, chi),
        -t,
        t,
        1e-10,
        1e-9,
    )?;
    Ok(q.value / (2.0 * z_crit(cfg.alpha) * cfg.sigma))
}
