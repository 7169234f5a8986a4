//! Worst-case non-coverage of a shrinkage interval under moment constraints
//! on the normalized bias, and the robust critical values derived from it.
//!
//! Everything is expressed on the `t = b²` scale where convenient:
//! `r0(t, chi) = r(sqrt t, chi)`.

use crate::error::{check_alpha, Error, Result};
use crate::optimize::{brent_min, brent_root};
use crate::special::{norm_cdf, norm_pdf, z_crit};

/// Above this kurtosis the fourth-moment constraint is treated as slack.
pub const KAPPA_SLACK: f64 = 1e6;

/// Tolerance in `chi` for [`cva`].
pub const CVA_TOL: f64 = 1e-6;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Moment constraints on the normalized bias `b`: `E[b²] = m2` and, optionally,
/// `E[b⁴] = kappa · m2²`. An absent kurtosis means "second moment only".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentConstraints {
    pub m2: f64,
    pub kappa: Option<f64>,
}

impl MomentConstraints {
    pub fn new(m2: f64, kappa: Option<f64>) -> Result<Self> {
        if !(m2 >= 0.0) || !m2.is_finite() {
            return Err(Error::InvalidArgument(format!("m2 must be finite and >= 0, got {m2}")));
        }
        let kappa = match kappa {
            Some(k) if k.is_infinite() && k > 0.0 => None,
            Some(k) if !(k >= 1.0) => {
                return Err(Error::InvalidArgument(format!("kurtosis must be >= 1, got {k}")))
            }
            other => other,
        };
        Ok(Self { m2, kappa })
    }

    pub fn second_only(m2: f64) -> Result<Self> {
        Self::new(m2, None)
    }
}

/// A finitely supported distribution with strictly increasing support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    pub points: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    /// Builds a distribution, sorting the support, merging duplicate points
    /// and dropping zero-probability atoms.
    pub fn new(points: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if points.len() != probs.len() || points.is_empty() {
            return Err(Error::InvalidArgument("points and probs must be nonempty and equally long".into()));
        }
        if probs.iter().any(|&p| !(p >= -1e-12) || !p.is_finite()) || points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("probabilities must be >= 0 and support finite".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
        let mut pairs: Vec<(f64, f64)> = points.into_iter().zip(probs).filter(|&(_, p)| p > 0.0).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out_x: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut out_p: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, p) in pairs {
            if out_x.last() == Some(&x) {
                *out_p.last_mut().expect("nonempty") += p;
            } else {
                out_x.push(x);
                out_p.push(p);
            }
        }
        Ok(Self { points: out_x, probs: out_p })
    }

    pub fn point_mass(x: f64) -> Self {
        Self { points: vec![x], probs: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `E[f(X)]`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.points.iter().zip(&self.probs).map(|(&x, &p)| p * f(x)).sum()
    }
}

/// Solver diagnostics attached to a critical value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// Kink of the least concave majorant of `r0`.
    pub t0: f64,
    /// Tangency point of the quadratic majorant (only with a kurtosis constraint).
    pub x0: Option<f64>,
    /// Second touch point of the quadratic majorant.
    pub x: Option<f64>,
    /// Quadratic coefficient of the dual majorant.
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalValueResult {
    pub chi: f64,
    pub noncoverage: f64,
    /// Least favorable distribution of `t = b²`.
    pub lf: DiscreteDistribution,
    pub diagnostics: Diagnostics,
}

/// Non-coverage of `[-chi, chi]` for a `N(b, 1)` variable.
#[inline]
pub fn r(b: f64, chi: f64) -> f64 {
    norm_cdf(-chi - b) + norm_cdf(-chi + b)
}

/// `r0(t) = r(sqrt t, chi)`.
#[inline]
pub fn r0(t: f64, chi: f64) -> f64 {
    r(t.max(0.0).sqrt(), chi)
}

/// `r0` with its first two derivatives in `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R0Derivs {
    pub r0: f64,
    pub d1: f64,
    pub d2: f64,
}

// Taylor coefficients of r0 around t = 0: c_k = 2 He_{2k-1}(chi) phi(chi) / (2k)!.
fn series_coeffs(chi: f64, out: &mut [f64]) {
    let phi = norm_pdf(chi);
    // He_0, He_1, ...
    let (mut h_prev, mut h) = (1.0, chi); // He_0, He_1
    let mut n = 1usize; // h = He_n
    let mut fact = 2.0; // (2k)! at k = 1
    for (k, c) in out.iter_mut().enumerate() {
        let k = k + 1;
        // advance to He_{2k-1}
        while n < 2 * k - 1 {
            let next = chi * h - n as f64 * h_prev;
            h_prev = h;
            h = next;
            n += 1;
        }
        if k > 1 {
            fact *= ((2 * k - 1) * (2 * k)) as f64;
        }
        *c = 2.0 * h * phi / fact;
    }
}

const SERIES_TERMS: usize = 40;

fn use_series(t: f64, chi: f64) -> bool {
    let u = t.sqrt();
    t <= 0.25 && chi * u <= 0.5
}

fn series_d2(t: f64, chi: f64) -> f64 {
    let mut c = [0.0; SERIES_TERMS];
    series_coeffs(chi, &mut c);
    let mut acc = 0.0;
    let mut tp = 1.0;
    for k in 2..=SERIES_TERMS {
        let term = (k * (k - 1)) as f64 * c[k - 1] * tp;
        acc += term;
        if term.abs() < 1e-18 * acc.abs() && k > 4 {
            break;
        }
        tp *= t;
    }
    acc
}

/// `r0`, `r0'` and `r0''` at `t >= 0`; at `t = 0` the one-sided limits
/// `r0'(0+) = chi phi(chi)` and `r0''(0+) = chi (chi² - 3) phi(chi) / 6` are used.
pub fn r0_derivs(t: f64, chi: f64) -> R0Derivs {
    let t = t.max(0.0);
    if t == 0.0 {
        let phi = norm_pdf(chi);
        return R0Derivs {
            r0: 2.0 * norm_cdf(-chi),
            d1: chi * phi,
            d2: chi * (chi * chi - 3.0) * phi / 6.0,
        };
    }
    let u = t.sqrt();
    let a = chi * u;
    let em = (-2.0 * a).exp_m1(); // e^{-2 chi u} - 1
    let phi_m = norm_pdf(u - chi);
    let d1 = phi_m * (-em) / (2.0 * u);
    let d2 = if use_series(t, chi) {
        series_d2(t, chi)
    } else {
        phi_m * (a * (2.0 + em) + (1.0 + t) * em) / (4.0 * u * t)
    };
    R0Derivs { r0: r(u, chi), d1, d2 }
}

/// `r0(0) - r0(u) + u r0'(u)`: positive on `(0, t0)` and negative beyond.
fn majorant_gap(u: f64, chi: f64) -> f64 {
    if use_series(u, chi) {
        let mut c = [0.0; SERIES_TERMS];
        series_coeffs(chi, &mut c);
        // sum_{k>=2} (k - 1) c_k u^k, with c[k - 1] = c_k
        let mut acc = 0.0;
        let mut tp = u;
        for k in 2..=SERIES_TERMS {
            tp *= u;
            acc += (k - 1) as f64 * c[k - 1] * tp;
        }
        return acc;
    }
    let d = r0_derivs(u, chi);
    2.0 * norm_cdf(-chi) - d.r0 + u * d.d1
}

/// The inflection point of `r0` (zero for `chi <= sqrt 3`, where `r0` is concave).
pub fn t1(chi: f64) -> f64 {
    if chi <= SQRT3 {
        return 0.0;
    }
    let lo = (chi * chi - 3.0).max(1e-12);
    // r0'' < 0 once sqrt(t) >= chi; staying close keeps the normal density from underflowing
    let mut hi = (chi + 0.5).powi(2);
    while r0_derivs(hi, chi).d2 > 0.0 {
        hi *= 2.0;
    }
    let lo = if r0_derivs(lo, chi).d2 > 0.0 { lo } else { 1e-14 };
    brent_root(|t| r0_derivs(t, chi).d2, lo, hi, 1e-12 * hi).unwrap_or(lo)
}

/// Point at which the least concave majorant of `r0(·, chi)` starts to coincide with
/// `r0`. Zero when `chi <= sqrt 3`.
pub fn t0(chi: f64) -> f64 {
    if chi <= SQRT3 {
        return 0.0;
    }
    let lo = t1(chi).max(1e-14);
    let mut hi = (2.0 * lo).max((chi - 1.0 / chi).powi(2) * 1.5).max(1e-3);
    let mut guard = 0;
    while majorant_gap(hi, chi) > 0.0 {
        hi *= 2.0;
        guard += 1;
        assert!(guard < 200, "t0 bracket search failed for chi = {chi}");
    }
    if majorant_gap(lo, chi) <= 0.0 {
        return lo;
    }
    brent_root(|u| majorant_gap(u, chi), lo, hi, 1e-13 * hi)
        .expect("majorant gap changes sign on the bracket")
}

/// Maximal non-coverage subject to `E[b²] = m2`.
pub fn rho_second(m2: f64, chi: f64) -> f64 {
    rho_second_with_t0(m2, chi, t0(chi))
}

fn rho_second_with_t0(m2: f64, chi: f64, t0: f64) -> f64 {
    if m2 >= t0 {
        r0(m2, chi)
    } else {
        let base = 2.0 * norm_cdf(-chi);
        base + (m2 / t0) * (r0(t0, chi) - base)
    }
}

/// Solution of the nested dual for the two-moment problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourthMomentSolution {
    pub value: f64,
    pub t0: f64,
    pub x0: f64,
    pub x: f64,
    pub lambda2: f64,
}

/// Grid sizes for the nested univariate optimizations in [`rho_fourth`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedGrid {
    pub outer: usize,
    pub inner: usize,
}

impl Default for NestedGrid {
    fn default() -> Self {
        Self { outer: 129, inner: 129 }
    }
}

struct InnerTable {
    xs: Vec<f64>,
    r0s: Vec<f64>,
}

// Gauss-Legendre nodes and weights on [0, 1] for int_0^1 (1 - s) f(s) ds.
const GL4_X: [f64; 4] = [0.069_431_844_202_973_71, 0.330_009_478_207_571_9, 0.669_990_521_792_428_1, 0.930_568_155_797_026_3];
const GL4_W: [f64; 4] = [0.173_927_422_568_726_9, 0.326_072_577_431_273_1, 0.326_072_577_431_273_1, 0.173_927_422_568_726_9];

/// Second-order divided difference `[r0(x) - r0(x0) - r0'(x0)(x - x0)] / (x - x0)²`.
fn delta(x: f64, rx: f64, x0: f64, d0: &R0Derivs, chi: f64) -> f64 {
    let h = x - x0;
    if h.abs() < 1e-3 * x0.max(1.0) {
        // integral form: int_0^1 (1 - s) r0''(x0 + s h) ds
        let mut acc = 0.0;
        for j in 0..4 {
            acc += GL4_W[j] * (1.0 - GL4_X[j]) * r0_derivs(x0 + GL4_X[j] * h, chi).d2;
        }
        acc
    } else {
        (rx - d0.r0 - d0.d1 * h) / (h * h)
    }
}

fn sup_delta(x0: f64, table: &InnerTable, t0: f64, chi: f64, refine: bool) -> (f64, f64) {
    let d0 = r0_derivs(x0, chi);
    let n = table.xs.len();
    let mut best = (table.xs[0], f64::NEG_INFINITY);
    let mut best_i = 0;
    for i in 0..n {
        let v = delta(table.xs[i], table.r0s[i], x0, &d0, chi);
        if v > best.1 {
            best = (table.xs[i], v);
            best_i = i;
        }
    }
    if !refine {
        return best;
    }
    let lo = table.xs[best_i.saturating_sub(1)];
    let hi = table.xs[(best_i + 1).min(n - 1)];
    let (xr, vr) = brent_min(|x| -delta(x, r0(x, chi), x0, &d0, chi), lo, hi, 1e-7 * t0.max(1.0));
    let vr = -vr;
    if vr > best.1 {
        (xr, vr)
    } else {
        best
    }
}

/// Maximal non-coverage subject to `E[b²] = m2` and `E[b⁴] = kappa m2²`, with the
/// default grids.
pub fn rho_fourth(m2: f64, kappa: f64, chi: f64) -> Result<f64> {
    Ok(rho_fourth_solve(m2, kappa, chi, NestedGrid::default())?.value)
}

/// Full solution of the two-moment problem. The outer infimum runs over the
/// tangency point `x0 ∈ [0, t0]` and the inner supremum over the second touch
/// point `x ∈ [0, t0]`.
pub fn rho_fourth_solve(m2: f64, kappa: f64, chi: f64, grid: NestedGrid) -> Result<FourthMomentSolution> {
    if !(kappa >= 1.0) {
        return Err(Error::InvalidArgument(format!("kurtosis must be >= 1, got {kappa}")));
    }
    if !(m2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("m2 must be >= 0, got {m2}")));
    }
    let t0 = t0(chi);
    if m2 >= t0 || m2 == 0.0 || kappa == 1.0 {
        return Ok(FourthMomentSolution { value: r0(m2, chi), t0, x0: m2, x: m2, lambda2: 0.0 });
    }
    if kappa >= KAPPA_SLACK {
        let value = rho_second_with_t0(m2, chi, t0);
        return Ok(FourthMomentSolution { value, t0, x0: 0.0, x: t0, lambda2: 0.0 });
    }
    let v = (kappa - 1.0) * m2 * m2;
    let n_in = grid.inner.max(3);
    let xs: Vec<f64> = (0..n_in).map(|i| t0 * i as f64 / (n_in - 1) as f64).collect();
    let r0s: Vec<f64> = xs.iter().map(|&x| r0(x, chi)).collect();
    let table = InnerTable { xs, r0s };
    let objective = |x0: f64, refine: bool| {
        let d = r0_derivs(x0, chi);
        let (_, s) = sup_delta(x0, &table, t0, chi, refine);
        d.r0 + (m2 - x0) * d.d1 + ((x0 - m2).powi(2) + v) * s
    };
    // scan the outer grid with the grid-only inner supremum, then refine
    // around the best point with the refined one
    let n_out = grid.outer.max(3);
    let h = t0 / (n_out - 1) as f64;
    let best_i = (0..n_out)
        .map(|i| (i, objective(h * i as f64, false)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let lo = h * best_i.saturating_sub(1) as f64;
    let hi = (h * (best_i + 1) as f64).min(t0);
    let at_grid = (h * best_i as f64, objective(h * best_i as f64, true));
    let refined = brent_min(|x0| objective(x0, true), lo, hi, 1e-7 * t0.max(1.0));
    let (x0, value) = if refined.1 < at_grid.1 { refined } else { at_grid };
    let (x, lambda2) = sup_delta(x0, &table, t0, chi, true);
    let rho2 = rho_second_with_t0(m2, chi, t0);
    let lower = r0(m2, chi);
    Ok(FourthMomentSolution { value: value.min(rho2).max(lower), t0, x0, x, lambda2 })
}

/// Worst-case non-coverage under the given constraints.
pub fn rho(c: &MomentConstraints, chi: f64) -> Result<f64> {
    match c.kappa {
        None => Ok(rho_second(c.m2, chi)),
        Some(k) => rho_fourth(c.m2, k, chi),
    }
}

fn two_point(m2: f64, v: f64, a: f64) -> Option<DiscreteDistribution> {
    // other point b with (m2 - a)(b - m2) = v
    let d = m2 - a;
    if d == 0.0 {
        return None;
    }
    let b = m2 + v / d;
    if a < 0.0 || b < 0.0 || !b.is_finite() {
        return None;
    }
    let pb = d * d / (d * d + v);
    DiscreteDistribution::new(vec![a, b], vec![1.0 - pb, pb]).ok()
}

/// Least favorable distribution of `t = b²` at the given `chi`.
pub fn least_favorable(c: &MomentConstraints, chi: f64) -> Result<DiscreteDistribution> {
    let t0v = t0(chi);
    let m2 = c.m2;
    match c.kappa {
        _ if m2 == 0.0 => Ok(DiscreteDistribution::point_mass(0.0)),
        Some(k) if k == 1.0 => Ok(DiscreteDistribution::point_mass(m2)),
        Some(k) if k < KAPPA_SLACK => {
            let v = (k - 1.0) * m2 * m2;
            if m2 >= t0v {
                // supremum approached by a vanishing atom far out
                let slope = r0_derivs(m2, chi).d1.max(1e-300);
                let eta = (1e-8 / slope).min(0.5 * m2).min(1e-4 * m2.max(1e-300) + 1e-8);
                let lo = m2 - eta;
                return two_point(m2, v, lo)
                    .ok_or_else(|| Error::Internal("cannot build least favorable pair".into()));
            }
            if t0v <= k * m2 {
                // the second-moment solution {0, t0} already meets the kurtosis bound
                let p = m2 / t0v;
                return DiscreteDistribution::new(vec![0.0, t0v], vec![1.0 - p, p]);
            }
            let sol = rho_fourth_solve(m2, k, chi, NestedGrid::default())?;
            let mut cands = Vec::new();
            cands.extend(two_point(m2, v, sol.x));
            cands.extend(two_point(m2, v, sol.x0));
            cands
                .into_iter()
                .map(|d| (d.expect(|t| r0(t, chi)), d))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, d)| d)
                .ok_or_else(|| Error::Internal("no feasible least favorable pair".into()))
        }
        _ => {
            if m2 >= t0v {
                Ok(DiscreteDistribution::point_mass(m2))
            } else {
                let p = m2 / t0v;
                DiscreteDistribution::new(vec![0.0, t0v], vec![1.0 - p, p])
            }
        }
    }
}

/// Robust critical value `chi` only, without the least favorable distribution.
pub fn cva_chi(c: &MomentConstraints, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let z = z_crit(alpha);
    if c.m2 == 0.0 {
        return Ok(z);
    }
    let f = |chi: f64| rho(c, chi).map(|v| v - alpha);
    let lo = z;
    let mut hi = ((1.0 + c.m2) / alpha).sqrt() * z + 1.0;
    let mut doublings = 0;
    while f(hi)? > 0.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::NotConverged(format!("cva bracket failed for m2 = {}", c.m2)));
        }
    }
    let flo = f(lo)?;
    if flo <= 0.0 {
        return Ok(lo);
    }
    let mut err = None;
    let chi = brent_root(
        |chi| match f(chi) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        },
        lo,
        hi,
        CVA_TOL * 1e-2,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(chi)
}

/// Robust critical value: the smallest `chi` whose worst-case non-coverage is at
/// most `alpha`, with the least favorable distribution and diagnostics.
pub fn cva(c: &MomentConstraints, alpha: f64) -> Result<CriticalValueResult> {
    let chi = cva_chi(c, alpha)?;
    let t0v = t0(chi);
    let mut diagnostics = Diagnostics { t0: t0v, x0: None, x: None, lambda2: None };
    let noncoverage = match c.kappa {
        Some(k) if c.m2 > 0.0 && c.m2 < t0v && k < KAPPA_SLACK => {
            let sol = rho_fourth_solve(c.m2, k, chi, NestedGrid::default())?;
            diagnostics.x0 = Some(sol.x0);
            diagnostics.x = Some(sol.x);
            diagnostics.lambda2 = Some(sol.lambda2);
            sol.value
        }
        _ => rho(c, chi)?,
    };
    let lf = least_favorable(c, chi)?;
    Ok(CriticalValueResult { chi, noncoverage, lf, diagnostics })
}

/// `z sqrt(1 + m2)`, the critical value that treats the bias as normal.
pub fn cva_parametric(m2: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(z_crit(alpha) * (1.0 + m2).sqrt())
}
