//! Worst-case non-coverage over distributions on a finite grid subject to
//! moment equalities, solved as a small linear program:
//!
//! maximize `Σ p_k r̃(x_k)` subject to `Σ p_k g(x_k) = m`, `Σ p_k = 1`, `p >= 0`.
//!
//! The row dimension is tiny (one plus the number of moments) while the grid may
//! have thousands of points, so a revised simplex with an explicitly refactored
//! basis is used.

use crate::error::{check_alpha, Error, Result};
use crate::rho::DiscreteDistribution;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-12;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GeneralMomentProblem {
    pub grid: Vec<f64>,
    pub reward: Vec<f64>,
    /// `g[j][k]` is the `j`th moment function at `grid[k]`.
    pub g: Vec<Vec<f64>>,
    pub m: Vec<f64>,
}

impl GeneralMomentProblem {
    pub fn new(grid: Vec<f64>, reward: Vec<f64>, g: Vec<Vec<f64>>, m: Vec<f64>) -> Result<Self> {
        let k = grid.len();
        if g.len() != m.len() {
            return Err(Error::InvalidArgument("one target per moment function required".into()));
        }
        if k < g.len() + 2 && k != 1 {
            return Err(Error::InvalidArgument(format!(
                "grid of {k} points is too small for {} moments",
                g.len()
            )));
        }
        if reward.len() != k || g.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidArgument("reward and moment rows must match the grid".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        if reward.iter().any(|r| !(-1e-12..=1.0 + 1e-12).contains(r)) {
            return Err(Error::InvalidArgument("rewards must lie in [0, 1]".into()));
        }
        if m.iter().chain(g.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("moment data must be finite".into()));
        }
        Ok(Self { grid, reward, g, m })
    }

    /// Problem with moment functions given as closures of the grid point.
    pub fn from_fns(grid: Vec<f64>, reward: Vec<f64>, g: &[&dyn Fn(f64) -> f64], m: Vec<f64>) -> Result<Self> {
        let rows = g.iter().map(|f| grid.iter().map(|&x| f(x)).collect()).collect();
        Self::new(grid, reward, rows, m)
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub value: f64,
    /// Optimal distribution over grid points.
    pub solution: DiscreteDistribution,
    /// Dual multipliers `(λ0, λ1, ..., λp)`: `λ0 + Σ λj g_j(x) >= r̃(x)` on the grid.
    pub duals: Vec<f64>,
    pub iterations: usize,
}

/// Default `t = b²` grid: log-spaced near zero plus linear spacing, on
/// `[0, max(10 m2, 2 t0, 100)]`.
pub fn default_t_grid(m2: f64, t0: f64, k: usize) -> Vec<f64> {
    let upper = (10.0 * m2).max(2.0 * t0).max(100.0);
    let n_log = k / 2;
    let n_lin = k - n_log;
    let mut pts = Vec::with_capacity(k + 1);
    pts.push(0.0);
    let lo = (1e-6 * upper).ln();
    let hi = upper.ln();
    for i in 0..n_log {
        pts.push((lo + (hi - lo) * i as f64 / n_log as f64).exp());
    }
    for i in 1..=n_lin {
        pts.push(upper * i as f64 / n_lin as f64);
    }
    if m2 > 0.0 && m2 <= upper {
        pts.push(m2);
    }
    if t0 > 0.0 {
        pts.push(t0);
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

struct Simplex<'a> {
    rows: usize,
    a: &'a [Vec<f64>], // rows x ncols, scaled
    b: Vec<f64>,
    ncols: usize,
    basis: Vec<usize>, // column index; >= ncols means artificial
    binv: Vec<f64>,
    x_b: Vec<f64>,
}

impl Simplex<'_> {
    fn column(&self, j: usize, out: &mut [f64]) {
        if j >= self.ncols {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[j - self.ncols] = 1.0;
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.a[i][j];
            }
        }
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.rows;
        let mut mat = vec![0.0; m * m];
        let mut col = vec![0.0; m];
        for (c, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for i in 0..m {
                mat[i * m + c] = col[i];
            }
        }
        self.binv = invert(&mat, m).ok_or_else(|| Error::NotConverged("singular simplex basis".into()))?;
        for i in 0..m {
            self.x_b[i] = (0..m).map(|k| self.binv[i * m + k] * self.b[k]).sum();
        }
        Ok(())
    }

    /// Runs the simplex for the given costs (maximization). `allowed(j)` says
    /// whether column `j` may enter.
    fn run<C: Fn(usize) -> f64, A: Fn(usize) -> bool>(&mut self, cost: C, allowed: A, max_iter: usize) -> Result<usize> {
        let m = self.rows;
        let mut col = vec![0.0; m];
        let mut u = vec![0.0; m];
        let mut y = vec![0.0; m];
        let mut degenerate_run = 0usize;
        for iter in 0..max_iter {
            // duals y = c_B' B^-1
            for k in 0..m {
                y[k] = (0..m).map(|i| cost(self.basis[i]) * self.binv[i * m + k]).sum();
            }
            let bland = degenerate_run > 50;
            let mut enter = None;
            let mut best = COST_TOL;
            for j in 0..self.ncols + m {
                if !allowed(j) || self.basis.contains(&j) {
                    continue;
                }
                self.column(j, &mut col);
                let d = cost(j) - (0..m).map(|i| y[i] * col[i]).sum::<f64>();
                if d > best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(j) = enter else {
                return Ok(iter);
            };
            self.column(j, &mut col);
            for i in 0..m {
                u[i] = (0..m).map(|k| self.binv[i * m + k] * col[k]).sum();
            }
            let mut leave = None;
            let mut ratio = f64::INFINITY;
            for i in 0..m {
                if u[i] > PIVOT_TOL {
                    let r = self.x_b[i].max(0.0) / u[i];
                    let better = match leave {
                        None => true,
                        Some(l) => r < ratio - 1e-15 || (r <= ratio + 1e-15 && self.basis[i] < self.basis[l]),
                    };
                    if better {
                        ratio = r;
                        leave = Some(i);
                    }
                }
            }
            let Some(l) = leave else {
                return Err(Error::NotConverged("unbounded linear program".into()));
            };
            degenerate_run = if ratio <= 1e-14 { degenerate_run + 1 } else { 0 };
            self.basis[l] = j;
            self.refactor()?;
        }
        Err(Error::NotConverged(format!("simplex did not converge in {max_iter} iterations")))
    }
}

fn invert(mat: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut a = mat.to_vec();
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i * m + c].abs().total_cmp(&a[j * m + c].abs()))?;
        if a[p * m + c].abs() < 1e-14 {
            return None;
        }
        if p != c {
            for k in 0..m {
                a.swap(p * m + k, c * m + k);
                inv.swap(p * m + k, c * m + k);
            }
        }
        let piv = a[c * m + c];
        for k in 0..m {
            a[c * m + k] /= piv;
            inv[c * m + k] /= piv;
        }
        for i in 0..m {
            if i != c {
                let f = a[i * m + c];
                if f != 0.0 {
                    for k in 0..m {
                        a[i * m + k] -= f * a[c * m + k];
                        inv[i * m + k] -= f * inv[c * m + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Solves the moment problem. Infeasible moment targets are reported as
/// [`Error::Infeasible`], solver breakdowns as [`Error::NotConverged`].
pub fn solve_rho_g(problem: &GeneralMomentProblem) -> Result<LpSolution> {
    let k = problem.grid.len();
    let rows = problem.g.len() + 1;
    // constraint matrix: first row sums probabilities, then moments; each row
    // scaled by its largest magnitude
    let mut a: Vec<Vec<f64>> = Vec::with_capacity(rows);
    let mut b = Vec::with_capacity(rows);
    let mut scale = Vec::with_capacity(rows);
    a.push(vec![1.0; k]);
    b.push(1.0);
    scale.push(1.0);
    for (row, &target) in problem.g.iter().zip(&problem.m) {
        let s = row.iter().fold(target.abs(), |acc, v| acc.max(v.abs())).max(1e-300);
        a.push(row.iter().map(|v| v / s).collect());
        b.push(target / s);
        scale.push(s);
    }
    // artificials carry the sign of b so that the starting point is feasible
    let mut sign = vec![1.0; rows];
    for i in 0..rows {
        if b[i] < 0.0 {
            sign[i] = -1.0;
            b[i] = -b[i];
            for v in a[i].iter_mut() {
                *v = -*v;
            }
        }
    }
    let mut sx = Simplex {
        rows,
        a: &a,
        b,
        ncols: k,
        basis: (k..k + rows).collect(),
        binv: vec![0.0; rows * rows],
        x_b: vec![0.0; rows],
    };
    sx.refactor()?;
    let max_iter = 50 * (k + rows) + 1000;
    let it1 = sx.run(|j| if j >= k { -1.0 } else { 0.0 }, |_| true, max_iter)?;
    let infeas: f64 = sx.basis.iter().zip(&sx.x_b).filter(|(&j, _)| j >= k).map(|(_, &x)| x).sum();
    if infeas > FEAS_TOL {
        return Err(Error::Infeasible(format!(
            "moment targets {:?} are not attainable on the grid (residual {infeas:.3e})",
            problem.m
        )));
    }
    // drive zero-level artificials out of the basis where possible
    let mut col = vec![0.0; rows];
    for pos in 0..rows {
        if sx.basis[pos] < k {
            continue;
        }
        let mut replacement = None;
        for j in 0..k {
            if sx.basis.contains(&j) {
                continue;
            }
            sx.column(j, &mut col);
            let u: f64 = (0..rows).map(|c| sx.binv[pos * rows + c] * col[c]).sum();
            if u.abs() > 1e-9 {
                replacement = Some(j);
                break;
            }
        }
        if let Some(j) = replacement {
            sx.basis[pos] = j;
            sx.refactor()?;
        }
    }
    let reward = &problem.reward;
    let it2 = sx.run(|j| if j >= k { 0.0 } else { reward[j] }, |j| j < k, max_iter)?;

    let mut pts = Vec::new();
    let mut probs = Vec::new();
    let mut value = 0.0;
    for (&j, &x) in sx.basis.iter().zip(&sx.x_b) {
        if j < k && x > 0.0 {
            pts.push(problem.grid[j]);
            probs.push(x);
            value += x * reward[j];
        }
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-7 {
        return Err(Error::NotConverged(format!("simplex solution mass {total}")));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    value /= total;
    // duals in original units
    let mut duals = vec![0.0; rows];
    for c in 0..rows {
        let y: f64 = (0..rows)
            .map(|i| {
                let j = sx.basis[i];
                let cj = if j < k { reward[j] } else { 0.0 };
                cj * sx.binv[i * rows + c]
            })
            .sum();
        duals[c] = y * sign[c] / scale[c];
    }
    Ok(LpSolution {
        value,
        solution: DiscreteDistribution::new(pts, probs)?,
        duals,
        iterations: it1 + it2,
    })
}

/// Options for [`invert_chi`].
#[derive(Debug, Clone, Copy)]
pub struct InvertOptions {
    pub lower: f64,
    pub upper: f64,
    pub tol: f64,
    pub max_doublings: usize,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self { lower: 0.0, upper: 4.0, tol: 1e-4, max_doublings: 40 }
    }
}

/// Smallest `chi` (to within `tol`) with `rho_g(chi) <= alpha`, by bisection.
/// The returned value is always one at which the bound was verified.
pub fn invert_chi<F>(mut family: F, alpha: f64, opts: InvertOptions) -> Result<f64>
where
    F: FnMut(f64) -> Result<GeneralMomentProblem>,
{
    check_alpha(alpha)?;
    let mut value_at = |chi: f64| -> Result<f64> { Ok(solve_rho_g(&family(chi)?)?.value) };
    let mut lo = opts.lower;
    if value_at(lo)? <= alpha {
        return Ok(lo);
    }
    let mut hi = opts.upper.max(lo + opts.tol);
    let mut doublings = 0;
    while value_at(hi)? > alpha {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > opts.max_doublings {
            return Err(Error::Calibration(format!(
                "worst-case non-coverage still above {alpha} at chi = {hi}"
            )));
        }
    }
    while hi - lo > opts.tol {
        let mid = 0.5 * (lo + hi);
        if value_at(mid)? <= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
