//! Per-unit intervals: robust, parametric, optimally shrunk and unshrunk, with
//! the parametric interval's worst-case distortion and average-power curves.

use std::collections::HashMap;
use std::sync::RwLock;

use rayon::prelude::*;

use crate::error::{check_alpha, Error, Result};
use crate::moments::{self, dot, MomentEstimates, MomentOptions, MomentVariant, UnitRecord};
use crate::optimize::brent_min;
use crate::rho::{cva_chi, r, rho_fourth, rho_second, MomentConstraints};
use crate::special::z_crit;

/// Shrinkage factor below which the parametric interval is flagged.
pub const RULE_OF_THUMB_W: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    RobustMu2,
    RobustMu2Kappa,
    Parametric,
    OptimalRobust,
    Unshrunk,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::RobustMu2 => "robust_mu2",
            Method::RobustMu2Kappa => "robust_mu2_kappa",
            Method::Parametric => "parametric",
            Method::OptimalRobust => "optimal_robust",
            Method::Unshrunk => "unshrunk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::RobustMu2, Method::RobustMu2Kappa, Method::Parametric, Method::OptimalRobust, Method::Unshrunk]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbciOutput {
    pub theta_hat: f64,
    pub w_eb: f64,
    pub cva: f64,
    pub lower: f64,
    pub upper: f64,
    pub half_length: f64,
    pub method: Method,
    pub param_max_noncov: f64,
    pub rule_of_thumb_ok: bool,
    /// Set when this unit's computation failed; numeric fields are NaN then.
    pub error: Option<String>,
}

impl EbciOutput {
    fn new(theta_hat: f64, w_eb: f64, cva: f64, half_length: f64, method: Method, param_max_noncov: f64) -> Self {
        Self {
            theta_hat,
            w_eb,
            cva,
            lower: theta_hat - half_length,
            upper: theta_hat + half_length,
            half_length,
            method,
            param_max_noncov,
            rule_of_thumb_ok: w_eb >= RULE_OF_THUMB_W,
            error: None,
        }
    }

    fn failed(method: Method, err: &Error) -> Self {
        Self {
            theta_hat: f64::NAN,
            w_eb: f64::NAN,
            cva: f64::NAN,
            lower: f64::NAN,
            upper: f64::NAN,
            half_length: f64::NAN,
            method,
            param_max_noncov: f64::NAN,
            rule_of_thumb_ok: false,
            error: Some(err.to_string()),
        }
    }
}

/// Memo of robust critical values keyed on `(m2, kappa)` rounded to 1e-6. The
/// value is computed at the rounded key, so results do not depend on which
/// thread fills an entry first.
#[derive(Debug)]
pub struct CvaCache {
    alpha: f64,
    map: RwLock<HashMap<(i64, i64), f64>>,
}

const CACHE_STEP: f64 = 1e-6;

fn round_key(v: f64) -> i64 {
    (v / CACHE_STEP).round() as i64
}

impl CvaCache {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, map: RwLock::new(HashMap::new()) }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn get(&self, m2: f64, kappa: Option<f64>) -> Result<f64> {
        let km = round_key(m2);
        let kk = kappa.map_or(i64::MAX, round_key);
        if let Some(&v) = self.map.read().expect("cache lock").get(&(km, kk)) {
            return Ok(v);
        }
        let c = MomentConstraints::new(km as f64 * CACHE_STEP, kappa.map(|_| kk as f64 * CACHE_STEP))?;
        let v = cva_chi(&c, self.alpha)?;
        self.map.write().expect("cache lock").insert((km, kk), v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub alpha: f64,
    pub method: Method,
    pub moments: MomentOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { alpha: 0.05, method: Method::RobustMu2Kappa, moments: MomentOptions::default() }
    }
}

/// Worst-case non-coverage of the parametric interval at shrinkage `w`.
pub fn param_max_noncoverage(w: f64, alpha: f64, kappa: Option<f64>) -> Result<f64> {
    check_alpha(alpha)?;
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::InvalidArgument(format!("shrinkage factor must lie in (0, 1], got {w}")));
    }
    let m2 = 1.0 / w - 1.0;
    let chi = z_crit(alpha) / w.sqrt();
    match kappa {
        None => Ok(rho_second(m2, chi)),
        Some(k) => rho_fourth(m2, k, chi),
    }
}

/// Shrinkage factor minimizing the robust half-length `cva((1 - 1/w)² snr, kappa) w`
/// over `w ∈ [1e-4, 1]` (200-point grid, then Brent refinement).
pub fn optimal_shrinkage(snr: f64, kappa: Option<f64>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(snr > 0.0) {
        return Err(Error::InvalidArgument(format!("signal-to-noise ratio must be positive, got {snr}")));
    }
    let cache = CvaCache::new(alpha);
    Ok(optimal_shrinkage_cached(snr, kappa, &cache)?.0)
}

/// Returns `(w_opt, cva at w_opt)`.
fn optimal_shrinkage_cached(snr: f64, kappa: Option<f64>, cache: &CvaCache) -> Result<(f64, f64)> {
    let mut first_err = None;
    let mut obj = |w: f64| -> f64 {
        let m2 = (1.0 - 1.0 / w).powi(2) * snr;
        match cva_direct(m2, kappa, cache.alpha) {
            Ok(c) => c * w,
            Err(e) => {
                first_err.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let (lo, hi, n): (f64, f64, usize) = (1e-4, 1.0, 200);
    let h = (hi - lo) / (n - 1) as f64;
    let mut best = (hi, obj(hi));
    let mut best_i = n - 1;
    for i in 0..n - 1 {
        let w = lo + h * i as f64;
        let v = obj(w);
        if v < best.1 {
            best = (w, v);
            best_i = i;
        }
    }
    let a = lo + h * best_i.saturating_sub(1) as f64;
    let b = (lo + h * (best_i + 1) as f64).min(hi);
    let refined = brent_min(&mut obj, a, b, 1e-7);
    if let Some(e) = first_err {
        return Err(e);
    }
    let (w, v) = if refined.1 < best.1 { refined } else { best };
    Ok((w, v / w))
}

fn cva_direct(m2: f64, kappa: Option<f64>, alpha: f64) -> Result<f64> {
    cva_chi(&MomentConstraints::new(m2, kappa)?, alpha)
}

/// Average power of the robust test and of the z-test at normalized distance `d`.
pub fn average_power(d: f64, w: f64, alpha: f64, kappa: Option<f64>) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::InvalidArgument(format!("shrinkage factor must lie in (0, 1), got {w}")));
    }
    let s = (1.0 - w).sqrt();
    let c = cva_direct(1.0 / w - 1.0, kappa, alpha)?;
    let robust = r(d * s / w, c * s);
    let ztest = r(d * s, z_crit(alpha) * s);
    Ok((robust, ztest))
}

/// `Y ± z σ`.
pub fn unshrunk_ci(unit: &UnitRecord, alpha: f64) -> Result<EbciOutput> {
    check_alpha(alpha)?;
    let z = z_crit(alpha);
    Ok(EbciOutput::new(unit.y, 1.0, z, z * unit.sigma, Method::Unshrunk, f64::NAN))
}

/// Parametric interval `X'δ + w(Y - X'δ) ± z sqrt(w) σ`.
pub fn parametric_ebci(unit: &UnitRecord, target: f64, mu2: f64, alpha: f64) -> Result<EbciOutput> {
    check_alpha(alpha)?;
    if !(mu2 > 0.0) {
        return Err(Error::InvalidArgument(format!("mu2 must be positive, got {mu2}")));
    }
    let s2 = unit.sigma * unit.sigma;
    let w = mu2 / (mu2 + s2);
    let z = z_crit(alpha);
    let theta = target + w * (unit.y - target);
    let pmn = if w < 1.0 { param_max_noncoverage(w, alpha, None)? } else { alpha };
    Ok(EbciOutput::new(theta, w, z, z * w.sqrt() * unit.sigma, Method::Parametric, pmn))
}

/// Robust interval `X'δ + w(Y - X'δ) ± cva(m2, kappa) w σ`; `mu2_i` is the
/// unit's conditional second moment (equal to `mu2` for the global variants).
#[allow(clippy::too_many_arguments)]
pub fn robust_ebci(
    unit: &UnitRecord,
    target: f64,
    mu2: f64,
    mu2_i: f64,
    kappa: Option<f64>,
    method: Method,
    cache: &CvaCache,
) -> Result<EbciOutput> {
    let s2 = unit.sigma * unit.sigma;
    let w = mu2 / (mu2 + s2);
    let m2 = (1.0 - 1.0 / w).powi(2) * mu2_i / s2;
    let c = cache.get(m2, kappa)?;
    let theta = target + w * (unit.y - target);
    let pmn = if w < 1.0 { param_max_noncoverage(w, cache.alpha, None)? } else { cache.alpha };
    Ok(EbciOutput::new(theta, w, c, c * w * unit.sigma, method, pmn))
}

/// Estimate moments and compute the requested interval for every unit. A unit
/// whose interval cannot be computed is returned with `error` set.
pub fn fit(data: &[UnitRecord], opts: &FitOptions) -> Result<(Vec<EbciOutput>, MomentEstimates)> {
    check_alpha(opts.alpha)?;
    let est = moments::estimate(data, &opts.moments)?;
    let cache = CvaCache::new(opts.alpha);
    let method = opts.method;
    let out: Vec<EbciOutput> = data
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let target = dot(&u.x, &est.delta);
            let (mu2_i, kappa_i) = match &est.per_unit {
                Some((m, k)) => (m[i], k[i]),
                None => (est.mu2, est.kappa),
            };
            let res = match method {
                Method::Unshrunk => unshrunk_ci(u, opts.alpha),
                Method::Parametric => parametric_ebci(u, target, est.mu2, opts.alpha),
                Method::RobustMu2 => robust_ebci(u, target, est.mu2, mu2_i, None, method, &cache),
                Method::RobustMu2Kappa => robust_ebci(u, target, est.mu2, mu2_i, Some(kappa_i), method, &cache),
                Method::OptimalRobust => optimal_unit(u, target, est.mu2, mu2_i, kappa_i, &cache, est.variant),
            };
            res.unwrap_or_else(|e| EbciOutput::failed(method, &e))
        })
        .collect();
    Ok((out, est))
}

fn optimal_unit(
    u: &UnitRecord,
    target: f64,
    mu2: f64,
    mu2_i: f64,
    kappa: f64,
    cache: &CvaCache,
    variant: MomentVariant,
) -> Result<EbciOutput> {
    let s2 = u.sigma * u.sigma;
    let snr = if variant == MomentVariant::Nn { mu2_i / s2 } else { mu2 / s2 };
    let (w, c) = optimal_shrinkage_cached(snr, Some(kappa), cache)?;
    let theta = target + w * (u.y - target);
    let w_eb = mu2 / (mu2 + s2);
    let pmn = if w_eb < 1.0 { param_max_noncoverage(w_eb, cache.alpha, None)? } else { cache.alpha };
    let mut o = EbciOutput::new(theta, w, c, c * w * u.sigma, Method::OptimalRobust, pmn);
    o.rule_of_thumb_ok = w_eb >= RULE_OF_THUMB_W;
    Ok(o)
}
