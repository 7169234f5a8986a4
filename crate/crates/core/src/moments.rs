//! Estimates of the shrinkage target and of the second moment and kurtosis of
//! `theta_i - X_i' delta`, with the finite-sample truncations used to keep them
//! in the admissible region.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::special::{ln_erfcx, norm_pdf};

/// One observation: unshrunk estimate, standard error, covariates and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub y: f64,
    pub sigma: f64,
    pub x: Vec<f64>,
    pub omega: f64,
}

impl UnitRecord {
    pub fn new(y: f64, sigma: f64, x: Vec<f64>, omega: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("standard error must be positive, got {sigma}")));
        }
        if !(omega >= 0.0) || !omega.is_finite() || !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("unit record values must be finite, weight >= 0".into()));
        }
        Ok(Self { y, sigma, x, omega })
    }

    /// Intercept-only unit.
    pub fn simple(y: f64, sigma: f64, omega: f64) -> Result<Self> {
        Self::new(y, sigma, vec![1.0], omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MomentVariant {
    Uc,
    Pmt,
    Fplib,
    Nn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub delta: Vec<f64>,
    pub mu2: f64,
    pub kappa: f64,
    pub variant: MomentVariant,
    /// Per-unit `(mu2_i, kappa_i)` for the nearest-neighbor variant.
    pub per_unit: Option<(Vec<f64>, Vec<f64>)>,
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Unconstrained moment estimates and their per-unit building blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct UcMoments {
    pub mu2: f64,
    pub mu4: f64,
    pub w2: Vec<f64>,
    pub w4: Vec<f64>,
}

/// Weighted least squares of `y` on `x`. A column that is (numerically) a
/// combination of the previous ones is reported by index.
pub fn wls_delta(data: &[UnitRecord]) -> Result<Vec<f64>> {
    let p = data.first().map(|u| u.x.len()).ok_or_else(|| Error::InvalidArgument("no data".into()))?;
    if data.iter().any(|u| u.x.len() != p) {
        return Err(Error::InvalidArgument("all units need the same number of covariates".into()));
    }
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for u in data {
        for a in 0..p {
            xty[a] += u.omega * u.x[a] * u.y;
            for b in 0..=a {
                xtx[a * p + b] += u.omega * u.x[a] * u.x[b];
            }
        }
    }
    // Cholesky factorization of the lower triangle
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = xtx[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > 1e-12 * xtx[j * p + j].abs().max(1e-300)) || xtx[j * p + j] == 0.0 {
            return Err(Error::RankDeficient { column: j });
        }
        let djj = d.sqrt();
        l[j * p + j] = djj;
        for i in j + 1..p {
            let mut s = xtx[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / djj;
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i * p + k] * z[k]).sum();
        z[i] = (xty[i] - s) / l[i * p + i];
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k * p + i] * beta[k]).sum();
        beta[i] = (z[i] - s) / l[i * p + i];
    }
    Ok(beta)
}

pub fn residuals(data: &[UnitRecord], delta: &[f64]) -> Vec<f64> {
    data.iter().map(|u| u.y - dot(&u.x, delta)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn weight_sums(data: &[UnitRecord]) -> Result<f64> {
    let s: f64 = data.iter().map(|u| u.omega).sum();
    if !(s > 0.0) {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    Ok(s)
}

/// Unconstrained estimates `mu2 = Σω W2 / Σω`, `mu4 = Σω W4 / Σω` with
/// `W2 = e² - σ²` and `W4 = e⁴ - 6σ²e² + 3σ⁴`.
pub fn moments_uc(data: &[UnitRecord], delta: &[f64]) -> Result<UcMoments> {
    let sw = weight_sums(data)?;
    let mut w2 = Vec::with_capacity(data.len());
    let mut w4 = Vec::with_capacity(data.len());
    for u in data {
        let e = u.y - dot(&u.x, delta);
        let (e2, s2) = (e * e, u.sigma * u.sigma);
        w2.push(e2 - s2);
        w4.push(e2 * e2 - 6.0 * s2 * e2 + 3.0 * s2 * s2);
    }
    let mu2 = data.iter().zip(&w2).map(|(u, w)| u.omega * w).sum::<f64>() / sw;
    let mu4 = data.iter().zip(&w4).map(|(u, w)| u.omega * w).sum::<f64>() / sw;
    Ok(UcMoments { mu2, mu4, w2, w4 })
}

fn pmt_from_parts(data: &[UnitRecord], mu2_uc: f64, mu4_uc: f64) -> Result<(f64, f64)> {
    let sw = weight_sums(data)?;
    let (mut s_w2s4, mut s_ws2, mut s_w2s8, mut s_ws4) = (0.0, 0.0, 0.0, 0.0);
    for u in data {
        let s2 = u.sigma * u.sigma;
        let s4 = s2 * s2;
        s_w2s4 += u.omega * u.omega * s4;
        s_ws2 += u.omega * s2;
        s_w2s8 += u.omega * u.omega * s4 * s4;
        s_ws4 += u.omega * s4;
    }
    let mu2 = mu2_uc.max(2.0 * s_w2s4 / (sw * s_ws2));
    let kappa = (mu4_uc / (mu2 * mu2)).max(1.0 + 32.0 * s_w2s8 / (mu2 * mu2 * sw * s_ws4));
    Ok((mu2, kappa))
}

/// Truncated estimates: `mu2` floored at `2Σω²σ⁴ / (Σω Σωσ²)` and the kurtosis at
/// `1 + 32Σω²σ⁸ / (mu2² Σω Σωσ⁴)`.
pub fn pmt(data: &[UnitRecord], uc: &UcMoments) -> Result<(f64, f64)> {
    pmt_from_parts(data, uc.mu2, uc.mu4)
}

/// Posterior mean of `m` under a flat prior on `[0, ∞)` given `m̂ ~ N(m, V)`.
pub fn fplib_b(m: f64, v: f64) -> f64 {
    let s = v.sqrt();
    // phi(x) / Phi(x) = sqrt(2/pi) / erfcx(-x / sqrt 2)
    let x = m / s;
    let mills = (2.0 / std::f64::consts::PI).sqrt() * (-ln_erfcx(-x / std::f64::consts::SQRT_2)).exp();
    debug_assert!(mills.is_finite() || norm_pdf(x) == 0.0);
    m + s * mills
}

/// Unbiased estimate of the variance of the weighted mean of `z`.
pub fn fplib_v(z: &[f64], omega: &[f64]) -> f64 {
    let sw: f64 = omega.iter().sum();
    let sw2: f64 = omega.iter().map(|w| w * w).sum();
    let mean = z.iter().zip(omega).map(|(z, w)| z * w).sum::<f64>() / sw;
    let num: f64 = z.iter().zip(omega).map(|(z, w)| w * w * (z * z - mean * mean)).sum();
    num / (sw * sw - sw2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FplibEstimate {
    pub mu2: f64,
    pub kappa: f64,
    /// The variance estimate was not positive and the truncated estimates were used.
    pub fell_back: bool,
}

/// Flat-prior limited-information Bayes estimates of `mu2` and the kurtosis.
pub fn fplib(data: &[UnitRecord], uc: &UcMoments) -> Result<FplibEstimate> {
    let omega: Vec<f64> = data.iter().map(|u| u.omega).collect();
    let sw: f64 = omega.iter().sum();
    let sw2: f64 = omega.iter().map(|w| w * w).sum();
    if !(sw > 0.0) || !(sw * sw > sw2) {
        return Err(Error::InvalidArgument("fplib needs at least two units with positive weight".into()));
    }
    let fallback = || -> Result<FplibEstimate> {
        let (mu2, kappa) = pmt(data, uc)?;
        Ok(FplibEstimate { mu2, kappa, fell_back: true })
    };
    let v2 = fplib_v(&uc.w2, &omega);
    if !(v2 > 0.0) {
        return fallback();
    }
    let mu2 = fplib_b(uc.mu2, v2);
    let z: Vec<f64> = uc.w4.iter().zip(&uc.w2).map(|(w4, w2)| w4 - 2.0 * mu2 * w2).collect();
    let v4 = fplib_v(&z, &omega);
    if !(v4 > 0.0) || !(mu2 > 0.0) {
        return fallback();
    }
    let kappa = 1.0 + fplib_b(uc.mu4 - uc.mu2 * uc.mu2, v4) / (mu2 * mu2);
    Ok(FplibEstimate { mu2, kappa, fell_back: false })
}

/// Standardized coordinates `(x, sigma)` for neighbor search. Constant
/// coordinates are dropped; a warning is produced unless the column is the
/// intercept.
fn nn_features(data: &[UnitRecord]) -> (Vec<Vec<f64>>, Vec<String>) {
    let n = data.len();
    let p = data[0].x.len();
    let mut warnings = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..=p {
        let col: Vec<f64> = data.iter().map(|u| if j < p { u.x[j] } else { u.sigma }).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        if !(sd > 0.0) {
            let intercept = j < p && col.iter().all(|&v| v == 1.0);
            if !intercept {
                let name = if j < p { format!("x{}", j + 1) } else { "se".to_string() };
                warnings.push(format!("coordinate {name} has zero standard deviation and is ignored in neighbor distances"));
            }
            continue;
        }
        cols.push(col.iter().map(|v| (v - mean) / sd).collect());
    }
    // transpose to row-major features
    let feats = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    (feats, warnings)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Units ordered by distance to `i` (ties by index), excluding `i` itself.
fn neighbor_order(feats: &[Vec<f64>], i: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = (0..feats.len()).filter(|&j| j != i).map(|j| (sq_dist(&feats[i], &feats[j]), j)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().map(|(_, j)| j).collect()
}

/// The `j` nearest units to `i` (including `i`), ties by index.
fn neighborhood(feats: &[Vec<f64>], i: usize, j: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = (0..feats.len()).map(|k| (if k == i { -1.0 } else { sq_dist(&feats[i], &feats[k]) }, k)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if j < idx.len() {
        idx.select_nth_unstable_by(j - 1, cmp);
        idx.truncate(j);
    }
    idx.into_iter().map(|(_, k)| k).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnMoments {
    pub mu2: Vec<f64>,
    pub kappa: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Per-unit truncated moments from the `j` nearest neighbors of each unit in
/// standardized `(x, sigma)` space. The neighborhood contains the unit itself,
/// so `j = n` reproduces the global estimates.
pub fn nn_moments(data: &[UnitRecord], delta: &[f64], j: usize) -> Result<NnMoments> {
    let n = data.len();
    if j < 2 || j > n {
        return Err(Error::InvalidArgument(format!("neighbor count {j} must lie in [2, {n}]")));
    }
    let uc = moments_uc(data, delta)?;
    let (feats, warnings) = nn_features(data);
    let per: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = neighborhood(&feats, i, j);
            let sub: Vec<UnitRecord> = nb.iter().map(|&k| data[k].clone()).collect();
            let sw: f64 = sub.iter().map(|u| u.omega).sum();
            if !(sw > 0.0) {
                return Err(Error::InvalidArgument(format!("unit {i} has a neighborhood with zero weight")));
            }
            let m2 = nb.iter().map(|&k| data[k].omega * uc.w2[k]).sum::<f64>() / sw;
            let m4 = nb.iter().map(|&k| data[k].omega * uc.w4[k]).sum::<f64>() / sw;
            pmt_from_parts(&sub, m2, m4)
        })
        .collect();
    let mut mu2 = Vec::with_capacity(n);
    let mut kappa = Vec::with_capacity(n);
    for r in per {
        let (a, b) = r?;
        mu2.push(a);
        kappa.push(b);
    }
    Ok(NnMoments { mu2, kappa, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub j: usize,
    /// `(J, criterion)` for every candidate in the grid.
    pub criterion: Vec<(usize, f64)>,
}

/// Leave-one-out choice of the neighbor count: each `W2_i` is predicted by the
/// weighted mean over its `J` nearest other units and the weighted squared
/// errors are summed. Ties (within 1e-12 of the weighted sum of squared `W2`) go
/// to the largest `J`.
pub fn cv_select_j(data: &[UnitRecord], delta: &[f64], j_grid: &[usize]) -> Result<CvResult> {
    let n = data.len();
    if j_grid.is_empty() {
        return Err(Error::InvalidArgument("empty neighbor-count grid".into()));
    }
    if let Some(&bad) = j_grid.iter().find(|&&j| j < 2 || j + 1 > n) {
        return Err(Error::InvalidArgument(format!("neighbor count {bad} must lie in [2, {}]", n.saturating_sub(1))));
    }
    let uc = moments_uc(data, delta)?;
    let (feats, _) = nn_features(data);
    let per_unit: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let order = neighbor_order(&feats, i);
            let mut sw = 0.0;
            let mut swz = 0.0;
            let mut prefix = Vec::with_capacity(order.len());
            for &k in &order {
                sw += data[k].omega;
                swz += data[k].omega * uc.w2[k];
                prefix.push((sw, swz));
            }
            j_grid
                .iter()
                .map(|&j| {
                    let (a, b) = prefix[j - 1];
                    let pred = if a > 0.0 { b / a } else { 0.0 };
                    data[i].omega * (uc.w2[i] - pred).powi(2)
                })
                .collect()
        })
        .collect();
    let criterion: Vec<(usize, f64)> = j_grid
        .iter()
        .enumerate()
        .map(|(g, &j)| (j, per_unit.iter().map(|row| row[g]).sum()))
        .collect();
    let min = criterion.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let scale: f64 = data.iter().zip(&uc.w2).map(|(u, w)| u.omega * w * w).sum();
    let j = criterion
        .iter()
        .filter(|c| c.1 <= min + 1e-12 * min.abs().max(scale))
        .map(|c| c.0)
        .max()
        .expect("nonempty grid");
    Ok(CvResult { j, criterion })
}

/// Options for [`estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentOptions {
    pub variant: MomentVariant,
    /// Neighbor count for the nearest-neighbor variant; chosen by
    /// cross-validation over `cv_grid` when absent.
    pub nn_j: Option<usize>,
    pub cv_grid: Vec<usize>,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self { variant: MomentVariant::Pmt, nn_j: None, cv_grid: Vec::new() }
    }
}

/// Default cross-validation grid: about 20 log-spaced counts in `[10, n - 1]`.
pub fn default_cv_grid(n: usize) -> Vec<usize> {
    let hi = n.saturating_sub(1);
    let lo = 10.min(hi).max(2);
    let mut g: Vec<usize> = (0..20)
        .map(|i| ((lo as f64).ln() + ((hi as f64).ln() - (lo as f64).ln()) * i as f64 / 19.0).exp().round() as usize)
        .collect();
    g.dedup();
    g
}

/// Shrinkage target and moment estimates for the requested variant.
pub fn estimate(data: &[UnitRecord], opts: &MomentOptions) -> Result<MomentEstimates> {
    let delta = wls_delta(data)?;
    let uc = moments_uc(data, &delta)?;
    let res = residuals(data, &delta);
    let mut warnings = Vec::new();
    let (mu2, kappa) = match opts.variant {
        MomentVariant::Uc => (uc.mu2, uc.mu4 / (uc.mu2 * uc.mu2)),
        MomentVariant::Fplib => {
            let f = fplib(data, &uc)?;
            if f.fell_back {
                warnings.push("flat-prior variance estimate not positive; truncated estimates used".into());
            }
            (f.mu2, f.kappa)
        }
        MomentVariant::Pmt | MomentVariant::Nn => pmt(data, &uc)?,
    };
    let per_unit = if opts.variant == MomentVariant::Nn {
        let j = match opts.nn_j {
            Some(j) => j,
            None => {
                let grid = if opts.cv_grid.is_empty() { default_cv_grid(data.len()) } else { opts.cv_grid.clone() };
                cv_select_j(data, &delta, &grid)?.j
            }
        };
        let nn = nn_moments(data, &delta, j)?;
        warnings.extend(nn.warnings);
        Some((nn.mu2, nn.kappa))
    } else {
        None
    };
    Ok(MomentEstimates { delta, mu2, kappa, variant: opts.variant, per_unit, residuals: res, warnings })
}
