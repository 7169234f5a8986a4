//! Linear EBCIs reported only for units whose estimate falls in a selection
//! window `[iota1, iota2]`.

use rayon::prelude::*;

use crate::error::{check_alpha, Error, Result};
use crate::lp::{default_t_grid, invert_chi, GeneralMomentProblem, InvertOptions};
use crate::rho::{cva_chi, t0, MomentConstraints};
use crate::special::norm_pdf;

use super::soft_threshold::norm_interval;

/// Below this selection probability a unit is treated as never selected.
const MIN_SELECTION_PROB: f64 = 1e-300;
const DENSITY_FLOOR: f64 = 1e-12;
const MU2_FLOOR: f64 = 1e-8;
pub const MIN_SELECTED: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionWindow {
    pub iota1: f64,
    pub iota2: f64,
}

impl SelectionWindow {
    pub fn new(iota1: f64, iota2: f64) -> Result<Self> {
        if !(iota1 < iota2) || iota1.is_nan() || iota2.is_nan() {
            return Err(Error::InvalidArgument(format!("selection window needs iota1 < iota2, got [{iota1}, {iota2}]")));
        }
        Ok(Self { iota1, iota2 })
    }

    pub fn everything() -> Self {
        Self { iota1: f64::NEG_INFINITY, iota2: f64::INFINITY }
    }

    pub fn contains(&self, y: f64) -> bool {
        self.iota1 <= y && y <= self.iota2
    }
}

/// Non-coverage conditional on `theta` and on selection, for the interval
/// `w Y +- chi w sigma`. The flag is set when `theta` is (numerically) never
/// selected, in which case the value is 1.
pub fn selection_noncoverage(theta: f64, chi: f64, window: &SelectionWindow, w: f64, sigma: f64) -> (f64, bool) {
    let b = (1.0 - 1.0 / w) * theta / sigma;
    let z1 = (window.iota1 - theta) / sigma;
    let z2 = (window.iota2 - theta) / sigma;
    let den = norm_interval(z1, z2);
    if !(den >= MIN_SELECTION_PROB) {
        return (1.0, true);
    }
    let lo = (-chi - b).max(z1);
    let hi = (chi - b).min(z2);
    let num = if hi > lo { norm_interval(lo, hi) } else { 0.0 };
    ((1.0 - num / den).clamp(0.0, 1.0), false)
}

/// Gaussian kernel estimate of a density together with its first two
/// derivatives.
#[derive(Debug, Clone)]
pub struct KernelDensity {
    pub bandwidth: f64,
    data: Vec<f64>,
    binned: Option<BinnedDensity>,
}

#[derive(Debug, Clone)]
struct BinnedDensity {
    start: f64,
    step: f64,
    f: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

const BINS: usize = 8192;

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(data: &[f64]) -> Result<f64> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument("bandwidth needs at least two observations".into()));
    }
    let mean = data.iter().sum::<f64>() / n as f64;
    let sd = (data.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument("data have no spread".into()));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

impl KernelDensity {
    /// Uses direct summation; see [`KernelDensity::binned`] for large samples.
    pub fn exact(data: &[f64], bandwidth: f64) -> Self {
        Self { bandwidth, data: data.to_vec(), binned: None }
    }

    /// Linear binning on a fine grid followed by discrete convolution.
    pub fn binned(data: &[f64], bandwidth: f64) -> Self {
        let h = bandwidth;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &y in data {
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let start = lo - 6.0 * h;
        let step = (hi - lo + 12.0 * h) / (BINS - 1) as f64;
        let mut counts = vec![0.0; BINS];
        for &y in data {
            let pos = (y - start) / step;
            let i = (pos.floor() as usize).min(BINS - 2);
            let frac = pos - i as f64;
            counts[i] += 1.0 - frac;
            counts[i + 1] += frac;
        }
        let half = ((8.0 * h / step).ceil() as usize).min(BINS - 1);
        let n = data.len() as f64;
        let mut k0 = Vec::with_capacity(2 * half + 1);
        let mut k1 = Vec::with_capacity(2 * half + 1);
        let mut k2 = Vec::with_capacity(2 * half + 1);
        for j in 0..=2 * half {
            // kernel evaluated at (grid point - data point) / h
            let u = (j as f64 - half as f64) * step / h;
            let p = norm_pdf(u);
            k0.push(p / (n * h));
            k1.push(-u * p / (n * h * h));
            k2.push((u * u - 1.0) * p / (n * h * h * h));
        }
        let conv = |k: &[f64]| -> Vec<f64> {
            (0..BINS)
                .into_par_iter()
                .map(|i| {
                    let jlo = i.saturating_sub(half);
                    let jhi = (i + half).min(BINS - 1);
                    (jlo..=jhi).map(|j| counts[j] * k[i + half - j]).sum()
                })
                .collect()
        };
        let binned = BinnedDensity { start, step, f: conv(&k0), d1: conv(&k1), d2: conv(&k2) };
        Self { bandwidth, data: Vec::new(), binned: Some(binned) }
    }

    /// Exact summation for small problems, binning otherwise.
    pub fn auto(data: &[f64], bandwidth: f64, evaluations: usize) -> Self {
        if data.len().saturating_mul(evaluations) <= 20_000_000 {
            Self::exact(data, bandwidth)
        } else {
            Self::binned(data, bandwidth)
        }
    }

    /// `(f, f', f'')` at `y`.
    pub fn eval(&self, y: f64) -> (f64, f64, f64) {
        match &self.binned {
            Some(b) => {
                let pos = (y - b.start) / b.step;
                if pos < 0.0 || pos > (BINS - 1) as f64 {
                    return (0.0, 0.0, 0.0);
                }
                let i = (pos.floor() as usize).min(BINS - 2);
                let frac = pos - i as f64;
                let lerp = |v: &[f64]| v[i] + frac * (v[i + 1] - v[i]);
                (lerp(&b.f), lerp(&b.d1), lerp(&b.d2))
            }
            None => {
                let h = self.bandwidth;
                let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
                for &x in &self.data {
                    let u = (y - x) / h;
                    let p = norm_pdf(u);
                    f += p;
                    d1 -= u * p;
                    d2 += (u * u - 1.0) * p;
                }
                let n = self.data.len() as f64;
                (f / (n * h), d1 / (n * h * h), d2 / (n * h * h * h))
            }
        }
    }

    /// First and second derivatives of `log f` at `y`, with `f` floored.
    pub fn log_derivs(&self, y: f64) -> (f64, f64) {
        let (f, d1, d2) = self.eval(y);
        let f = f.max(DENSITY_FLOOR);
        let l1 = d1 / f;
        (l1, d2 / f - l1 * l1)
    }
}

/// Tweedie estimate of `E[theta^2 | Y in window]`.
///
/// The log marginal density is estimated from every observation; the posterior
/// second moment `(y + s^2 l'(y))^2 + s^2 + s^4 l''(y)` is then averaged over
/// the selected ones.
pub fn selection_moment(ys: &[f64], window: &SelectionWindow, sigma: f64) -> Result<f64> {
    let selected: Vec<f64> = ys.iter().copied().filter(|&y| window.contains(y)).collect();
    if selected.len() < MIN_SELECTED {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SELECTED} selected observations, got {}",
            selected.len()
        )));
    }
    let kde = KernelDensity::auto(ys, silverman_bandwidth(ys)?, selected.len());
    Ok(tweedie_second_moment(&kde, &selected, sigma))
}

pub fn tweedie_second_moment(kde: &KernelDensity, selected: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let total: f64 = selected
        .par_iter()
        .map(|&y| {
            let (l1, l2) = kde.log_derivs(y);
            (y + s2 * l1).powi(2) + s2 + s2 * s2 * l2
        })
        .sum();
    (total / selected.len() as f64).max(MU2_FLOOR)
}

/// Support grid for the selection linear program: `+-` the points of the
/// baseline `t`-scale grid, mapped to `theta = sqrt(t) sigma w / (1 - w)`.
pub fn default_selection_grid(mu2: f64, sigma: f64, alpha: f64) -> Result<Vec<f64>> {
    let m2 = sigma * sigma / mu2;
    let chi = cva_chi(&MomentConstraints::second_only(m2)?, alpha)?;
    let scale = mu2 / sigma; // sigma w / (1 - w)
    let ts = default_t_grid(m2, t0(chi), 1000);
    let mut grid: Vec<f64> = ts.iter().map(|t| t.sqrt() * scale).collect();
    grid.extend(ts.iter().filter(|&&t| t > 0.0).map(|t| -t.sqrt() * scale));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Critical value such that the worst case, over distributions on the grid
/// with `E[theta^2] = mu2_cond`, of the selection-conditional non-coverage is
/// `alpha`.
pub fn selection_cva(
    mu2_cond: f64,
    window: &SelectionWindow,
    w: f64,
    sigma: f64,
    alpha: f64,
    theta_grid: &[f64],
) -> Result<f64> {
    check_alpha(alpha)?;
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::InvalidArgument(format!("shrinkage factor must lie in (0, 1), got {w}")));
    }
    let mu2 = mu2_cond.max(MU2_FLOOR);
    let family = |chi: f64| {
        let reward = theta_grid.par_iter().map(|&t| selection_noncoverage(t, chi, window, w, sigma).0).collect();
        GeneralMomentProblem::from_fns(theta_grid.to_vec(), reward, &[&|t| t * t], vec![mu2])
    };
    invert_chi(family, alpha, InvertOptions { tol: 1e-7, ..InvertOptions::default() })
}

/// `E[theta^2 | Y in window]` for a discrete `theta` distribution and normal noise.
pub fn conditional_second_moment(points: &[f64], probs: &[f64], window: &SelectionWindow, sigma: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&t, &p) in points.iter().zip(probs) {
        let s = p * norm_interval((window.iota1 - t) / sigma, (window.iota2 - t) / sigma);
        num += s * t * t;
        den += s;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use crate::rho::r;
    use crate::special::norm_cdf;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn no_window_reduces_to_r() {
        let all = SelectionWindow::everything();
        for &(theta, chi, w) in &[(0.0, 1.9, 0.5), (1.3, 2.2, 0.3), (-4.0, 1.0, 0.8)] {
            let b = (1.0 - 1.0 / w) * theta;
            let (v, flag) = selection_noncoverage(theta, chi, &all, w, 1.0);
            assert!(!flag);
            assert_abs_diff_eq!(v, r(b, chi), epsilon = 1e-14);
        }
    }

    #[test]
    fn matches_truncated_normal_simulation() {
        let win = SelectionWindow::new(0.0, f64::INFINITY).unwrap();
        let (theta, w, sigma, chi) = (1.0, 0.5, 1.0, 1.5);
        let (v, _) = selection_noncoverage(theta, chi, &win, w, sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mut sel, mut miss) = (0u64, 0u64);
        for _ in 0..1_000_000 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = theta + sigma * z;
            if win.contains(y) {
                sel += 1;
                if (w * y - theta).abs() > chi * w * sigma {
                    miss += 1;
                }
            }
        }
        let p = miss as f64 / sel as f64;
        let se = (p * (1.0 - p) / sel as f64).sqrt();
        assert!((p - v).abs() <= 3.0 * se, "mc {p} formula {v} se {se}");
    }

    #[test]
    fn never_selected_is_flagged() {
        let win = SelectionWindow::new(100.0, 101.0).unwrap();
        let (v, flag) = selection_noncoverage(-100.0, 2.0, &win, 0.5, 1.0);
        assert!(flag);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn binned_density_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h = silverman_bandwidth(&data).unwrap();
        let exact = KernelDensity::exact(&data, h);
        let binned = KernelDensity::binned(&data, h);
        for &y in &[-2.0, -0.3, 0.0, 1.1, 2.7] {
            let (a0, a1, a2) = exact.eval(y);
            let (b0, b1, b2) = binned.eval(y);
            assert_abs_diff_eq!(a0, b0, epsilon = 1e-4);
            assert_abs_diff_eq!(a1, b1, epsilon = 1e-3);
            assert_abs_diff_eq!(a2, b2, epsilon = 1e-2);
        }
    }

    #[test]
    fn kernel_derivatives_by_finite_difference() {
        let data = [-1.0, 0.2, 0.5, 2.0, 2.1];
        let k = KernelDensity::exact(&data, 0.4);
        let e = 1e-5;
        for &y in &[-0.5, 0.7, 1.9] {
            let (_, d1, d2) = k.eval(y);
            let fd1 = (k.eval(y + e).0 - k.eval(y - e).0) / (2.0 * e);
            let fd2 = (k.eval(y + e).1 - k.eval(y - e).1) / (2.0 * e);
            assert_abs_diff_eq!(d1, fd1, epsilon = 1e-7);
            assert_abs_diff_eq!(d2, fd2, epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerate_effects_give_tiny_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ys: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = selection_moment(&ys, &SelectionWindow::everything(), 1.0).unwrap();
        assert!(m >= 1e-8 && m < 0.05, "got {m}");
    }

    #[test]
    fn too_few_selected_is_rejected() {
        let ys: Vec<f64> = (0..100).map(|i| i as f64 / 10.0 - 9.5).collect();
        let win = SelectionWindow::new(0.0, f64::INFINITY).unwrap();
        assert!(selection_moment(&ys, &win, 1.0).is_err());
    }

    #[test]
    fn half_line_window_matches_quadrature() {
        // theta ~ N(0, mu2): E[theta^2 | Y > 0] by two-dimensional quadrature
        let mu2: f64 = 1.5;
        let win = SelectionWindow::new(0.0, f64::INFINITY).unwrap();
        let sd = mu2.sqrt();
        let inner = |t: f64| norm_pdf(t / sd) / sd * norm_cdf(t);
        let num = integrate(|t| t * t * inner(t), -12.0, 12.0, 1e-12, 1e-12).unwrap().value;
        let den = integrate(inner, -12.0, 12.0, 1e-12, 1e-12).unwrap().value;
        let oracle = num / den;
        // the kernel estimate is noisy, so compare a replicate mean against its own se
        let reps: Vec<f64> = (0..8u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let ys: Vec<f64> = (0..100_000)
                    .map(|_| {
                        let t: f64 = StandardNormal.sample(&mut rng);
                        let e: f64 = StandardNormal.sample(&mut rng);
                        sd * t + e
                    })
                    .collect();
                selection_moment(&ys, &win, 1.0).unwrap()
            })
            .collect();
        let mean = reps.iter().sum::<f64>() / 8.0;
        let var = reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        let se = (var / 8.0).sqrt();
        assert!((mean - oracle).abs() <= 3.0 * se, "mean {mean} oracle {oracle} se {se}");
    }

    #[test]
    fn widening_window_moves_toward_baseline() {
        let (mu2, sigma, alpha) = (1.0, 1.0, 0.05);
        let w = mu2 / (mu2 + sigma * sigma);
        let grid = default_selection_grid(mu2, sigma, alpha).unwrap();
        let base = selection_cva(mu2, &SelectionWindow::everything(), w, sigma, alpha, &grid).unwrap();
        let mut prev_gap = f64::INFINITY;
        for &lo in &[0.5, -0.5, -1.5, -3.0, -6.0, -10.0] {
            let win = SelectionWindow::new(lo, f64::INFINITY).unwrap();
            let chi = selection_cva(mu2, &win, w, sigma, alpha, &grid).unwrap();
            let gap = (chi - base).abs();
            assert!(gap <= prev_gap + 1e-6, "lo {lo}: gap {gap} prev {prev_gap}");
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }
}
