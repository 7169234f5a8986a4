//! Monte Carlo coverage studies: fixed-effects panel designs, a heteroskedastic
//! resampling design and selection-conditional coverage.
//!
//! Every replication draws from its own ChaCha stream keyed by the master seed,
//! the design index and the replication index, and results are reduced in
//! replication order, so reports do not depend on the number of workers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ebci::{CvaCache, Method};
use crate::error::{check_alpha, Error, Result};
use crate::moments::{self, MomentOptions, UnitRecord};
use crate::nonlinear::selection::{conditional_second_moment, selection_cva, SelectionWindow};
use crate::rho::{cva_chi, t0, MomentConstraints};
use crate::special::z_crit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThetaKind {
    Normal,
    ScaledChi2,
    TwoPoint,
    ThreePoint,
    LfRobust,
    LfParametric,
}

impl ThetaKind {
    pub const ALL: [ThetaKind; 6] = [
        ThetaKind::Normal,
        ThetaKind::ScaledChi2,
        ThetaKind::TwoPoint,
        ThetaKind::ThreePoint,
        ThetaKind::LfRobust,
        ThetaKind::LfParametric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThetaKind::Normal => "normal",
            ThetaKind::ScaledChi2 => "scaled_chi2_1",
            ThetaKind::TwoPoint => "two_point",
            ThetaKind::ThreePoint => "three_point",
            ThetaKind::LfRobust => "lf_robust",
            ThetaKind::LfParametric => "lf_parametric",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Effect distribution with variance `mu2`. The least favorable kinds are
/// symmetric three-point laws `{0, +-sqrt(mu2/p)}` with `p = min(m2/t0, 1)`
/// and `m2 = 1/mu2` (unit noise variance).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDistribution {
    pub kind: ThetaKind,
    pub mu2: f64,
    pub alpha: f64,
    lf_p: f64,
}

const TWO_POINT_P: f64 = 0.1;

impl ThetaDistribution {
    pub fn new(kind: ThetaKind, mu2: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(mu2 > 0.0 && mu2.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu2 must be positive, got {mu2}")));
        }
        let m2 = 1.0 / mu2;
        let lf_p = match kind {
            ThetaKind::LfRobust => {
                let chi = cva_chi(&MomentConstraints::second_only(m2)?, alpha)?;
                (m2 / t0(chi)).min(1.0)
            }
            ThetaKind::LfParametric => {
                let chi = z_crit(alpha) / (mu2 / (1.0 + mu2)).sqrt();
                (m2 / t0(chi)).min(1.0)
            }
            _ => f64::NAN,
        };
        Ok(Self { kind, mu2, alpha, lf_p })
    }

    pub fn kurtosis(&self) -> f64 {
        match self.kind {
            ThetaKind::Normal => 3.0,
            ThetaKind::ScaledChi2 => 15.0,
            ThetaKind::TwoPoint => 1.0 / (TWO_POINT_P * (1.0 - TWO_POINT_P)) - 3.0,
            ThetaKind::ThreePoint => 2.0,
            ThetaKind::LfRobust | ThetaKind::LfParametric => 1.0 / self.lf_p,
        }
    }

    /// Support points and probabilities of the discrete kinds.
    pub fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let mu2 = self.mu2;
        match self.kind {
            ThetaKind::Normal | ThetaKind::ScaledChi2 => None,
            ThetaKind::TwoPoint => {
                let p = TWO_POINT_P;
                Some((vec![0.0, (mu2 / (p * (1.0 - p))).sqrt()], vec![1.0 - p, p]))
            }
            ThetaKind::ThreePoint => {
                let a = (mu2 / 0.5).sqrt();
                Some((vec![-a, 0.0, a], vec![0.25, 0.5, 0.25]))
            }
            ThetaKind::LfRobust | ThetaKind::LfParametric => {
                let p = self.lf_p;
                let a = (mu2 / p).sqrt();
                if p >= 1.0 {
                    Some((vec![-a, a], vec![0.5, 0.5]))
                } else {
                    Some((vec![-a, 0.0, a], vec![0.5 * p, 1.0 - p, 0.5 * p]))
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mu2 = self.mu2;
        match self.kind {
            ThetaKind::Normal => mu2.sqrt() * rng.sample::<f64, _>(StandardNormal),
            ThetaKind::ScaledChi2 => {
                let z: f64 = rng.sample(StandardNormal);
                (mu2 / 2.0).sqrt() * z * z
            }
            _ => {
                let (pts, probs) = self.support().expect("discrete kind");
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (x, p) in pts.iter().zip(&probs) {
                    acc += p;
                    if u < acc {
                        return *x;
                    }
                }
                *pts.last().expect("nonempty support")
            }
        }
    }
}

pub fn draw_theta<R: Rng + ?Sized>(dist: &ThetaDistribution, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Normal,
    /// `(chi2(3) - 3) / sqrt(6)`, rescaled.
    ShiftedChi2,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Normal => "normal",
            ErrorKind::ShiftedChi2 => "chi2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ErrorKind::Normal, ErrorKind::ShiftedChi2].into_iter().find(|k| k.name() == s)
    }
}

/// `W_it = theta_i + U_it`, `Y_i` the unit mean. The noise is scaled so that
/// `Var(Y_i | theta_i) = 1`, hence `mu2 = snr`. `t = None` draws `Y_i` exactly
/// from `N(theta_i, 1)` and reports the true standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDesign {
    pub n: usize,
    pub t: Option<usize>,
    pub err: ErrorKind,
    pub snr: f64,
    pub theta: ThetaDistribution,
}

impl PanelDesign {
    pub fn new(n: usize, t: Option<usize>, err: ErrorKind, kind: ThetaKind, snr: f64, alpha: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
        }
        if matches!(t, Some(t) if t < 2) {
            return Err(Error::InvalidArgument("need T >= 2".into()));
        }
        Ok(Self { n, t, err, snr, theta: ThetaDistribution::new(kind, snr, alpha)? })
    }

    pub fn label(&self) -> String {
        let t = self.t.map_or("inf".to_string(), |t| t.to_string());
        format!("panel n={} T={} err={} theta={} snr={}", self.n, t, self.err.name(), self.theta.kind.name(), self.snr)
    }
}

/// Units (with estimated standard errors) and the true effects.
pub fn simulate_panel<R: Rng + ?Sized>(design: &PanelDesign, rng: &mut R) -> Result<(Vec<UnitRecord>, Vec<f64>)> {
    let n = design.n;
    let theta = draw_theta(&design.theta, n, rng);
    let omega = 1.0 / n as f64;
    let chi2 = ChiSquared::new(3.0).map_err(|e| Error::Internal(e.to_string()))?;
    let mut units = Vec::with_capacity(n);
    for &th in &theta {
        let (y, se) = match design.t {
            None => (th + rng.sample::<f64, _>(StandardNormal), 1.0),
            Some(t) => {
                let sd_u = (t as f64).sqrt();
                let w: Vec<f64> = (0..t)
                    .map(|_| {
                        let e = match design.err {
                            ErrorKind::Normal => rng.sample::<f64, _>(StandardNormal),
                            ErrorKind::ShiftedChi2 => (chi2.sample(rng) - 3.0) / 6f64.sqrt(),
                        };
                        th + sd_u * e
                    })
                    .collect();
                let tf = t as f64;
                let y = w.iter().sum::<f64>() / tf;
                let ss: f64 = w.iter().map(|v| (v - y).powi(2)).sum();
                (y, (ss / (tf * (tf - 1.0))).sqrt())
            }
        };
        units.push(UnitRecord::simple(y, se, omega)?);
    }
    Ok((units, theta))
}

/// Resampling design built from observed `(theta_hat, se)` pairs: effects and
/// standard errors are drawn independently with replacement and the effects are
/// rescaled so that `E[eps^2 / sigma^2]` equals `snr`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroDesign {
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub snr: f64,
    pub n: usize,
}

impl HeteroDesign {
    pub fn new(theta_hat: Vec<f64>, se: Vec<f64>, snr: f64) -> Result<Self> {
        if theta_hat.len() != se.len() || theta_hat.len() < 2 {
            return Err(Error::InvalidArgument("need at least two (theta_hat, se) pairs of equal length".into()));
        }
        if se.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("standard errors must be positive".into()));
        }
        if !(snr > 0.0) {
            return Err(Error::InvalidArgument(format!("snr must be positive, got {snr}")));
        }
        let n = theta_hat.len();
        let d = Self { theta_hat, se, snr, n };
        if !(d.scale_constant() > 0.0) {
            return Err(Error::InvalidArgument("effect estimates have no spread".into()));
        }
        Ok(d)
    }

    /// Reads a CSV with columns `theta_hat` and `se`.
    pub fn from_csv(path: &Path, snr: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| Error::InvalidArgument(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing column `{name}` in {}", path.display())))
        };
        let (it, is) = (col("theta_hat")?, col("se")?);
        let (mut th, mut se) = (Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let parse = |i: usize, name: &str| -> Result<f64> {
                rec.get(i).and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                    Error::InvalidArgument(format!("bad value in column `{name}` at line {}", line + 2))
                })
            };
            th.push(parse(it, "theta_hat")?);
            se.push(parse(is, "se")?);
        }
        Self::new(th, se, snr)
    }

    fn mean_theta(&self) -> f64 {
        self.theta_hat.iter().sum::<f64>() / self.n as f64
    }

    /// `E_n[(theta_hat - mean)^2] E_n[1 / se^2]`.
    pub fn scale_constant(&self) -> f64 {
        let m = self.mean_theta();
        let v = self.theta_hat.iter().map(|t| (t - m).powi(2)).sum::<f64>() / self.n as f64;
        let p = self.se.iter().map(|s| 1.0 / (s * s)).sum::<f64>() / self.n as f64;
        v * p
    }

    /// Variance and kurtosis of the rescaled effect distribution.
    pub fn theta_moments(&self) -> (f64, f64) {
        let m = self.mean_theta();
        let n = self.n as f64;
        let v = self.theta_hat.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n;
        let m4 = self.theta_hat.iter().map(|t| (t - m).powi(4)).sum::<f64>() / n;
        (v * self.snr / self.scale_constant(), m4 / (v * v))
    }

    pub fn label(&self) -> String {
        format!("hetero n={} snr={}", self.n, self.snr)
    }

    fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<UnitRecord>, Vec<f64>)> {
        let m = self.mean_theta();
        let scale = (self.snr / self.scale_constant()).sqrt();
        let mut units = Vec::with_capacity(self.n);
        let mut theta = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let tt = self.theta_hat[rng.random_range(0..self.n)];
            let s = self.se[rng.random_range(0..self.n)];
            let th = m + scale * (tt - m);
            let y = th + s * rng.sample::<f64, _>(StandardNormal);
            units.push(UnitRecord::simple(y, s, 1.0 / (s * s))?);
            theta.push(th);
        }
        Ok((units, theta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    Panel(PanelDesign),
    Hetero(HeteroDesign),
}

impl Design {
    pub fn label(&self) -> String {
        match self {
            Design::Panel(p) => p.label(),
            Design::Hetero(h) => h.label(),
        }
    }

    /// `(mu2, kappa)` of the effect distribution.
    fn oracle_moments(&self) -> (f64, f64) {
        match self {
            Design::Panel(p) => (p.theta.mu2, p.theta.kurtosis()),
            Design::Hetero(h) => h.theta_moments(),
        }
    }

    /// Estimated standard errors are all equal (exact-normal panel mode).
    fn known_common_se(&self) -> bool {
        matches!(self, Design::Panel(p) if p.t.is_none())
    }

    /// True standard errors are all equal.
    fn homoskedastic(&self) -> bool {
        matches!(self, Design::Panel(_))
    }

    fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<UnitRecord>, Vec<f64>, Vec<f64>)> {
        match self {
            Design::Panel(p) => {
                let (u, th) = simulate_panel(p, rng)?;
                let n = u.len();
                Ok((u, th, vec![1.0; n]))
            }
            Design::Hetero(h) => {
                let (u, th) = h.simulate(rng)?;
                let s = u.iter().map(|x| x.sigma).collect();
                Ok((u, th, s))
            }
        }
    }
}

/// The 24 panel designs: six effect distributions by four signal-to-noise ratios.
pub fn standard_designs(n: usize, t: Option<usize>, err: ErrorKind, alpha: f64) -> Result<Vec<Design>> {
    let mut out = Vec::with_capacity(24);
    for kind in ThetaKind::ALL {
        for snr in [0.1, 0.5, 1.0, 2.0] {
            out.push(Design::Panel(PanelDesign::new(n, t, err, kind, snr, alpha)?));
        }
    }
    Ok(out)
}

/// An interval rule evaluated in the study. Oracle rules use the true moments
/// and standard errors but still estimate the shrinkage target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimMethod {
    pub method: Method,
    pub oracle: bool,
}

impl SimMethod {
    pub fn label(&self) -> String {
        if self.oracle {
            format!("{}_oracle", self.method.name())
        } else {
            self.method.name().to_string()
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (base, oracle) = match s.strip_suffix("_oracle") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let method = Method::parse(base)?;
        matches!(method, Method::RobustMu2 | Method::RobustMu2Kappa | Method::Parametric | Method::Unshrunk)
            .then_some(Self { method, oracle })
    }

    /// Estimated and oracle versions of the two robust rules and the parametric rule.
    pub fn standard() -> Vec<Self> {
        let mut v = Vec::new();
        for oracle in [false, true] {
            for method in [Method::RobustMu2, Method::RobustMu2Kappa, Method::Parametric] {
                v.push(Self { method, oracle });
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub design: String,
    pub design_index: usize,
    pub method: String,
    pub coverage: f64,
    pub coverage_se: f64,
    pub avg_length: f64,
    /// Average length divided by that of the oracle robust `(mu2, kappa)` rule.
    pub rel_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub reps: usize,
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    /// Smallest average coverage of `method` across designs.
    pub fn min_coverage(&self, method: &str) -> Option<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.coverage).min_by(f64::total_cmp)
    }

    pub fn row(&self, design_index: usize, method: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.design_index == design_index && r.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyConfig {
    pub reps: usize,
    pub workers: usize,
    pub seed: u64,
    pub alpha: f64,
}

/// Generator for one replication of one design.
pub fn rep_rng(seed: u64, design: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((design as u64) << 32) | rep as u64);
    rng
}

/// Table of `cva(m2, kappa)` for fast per-unit lookups.
///
/// For `kappa` at or above `kappa*(m2) = t0(c2) / m2`, where `c2` is the
/// second-moment-only critical value, the fourth-moment constraint is slack and
/// `cva = c2`. Below it the surface is interpolated bicubically (Catmull-Rom)
/// in `ln m2` and `u = sqrt(ln(kappa*-1) - ln(kappa-1))`; the square root
/// resolves the quadratic approach to `c2` near the kink. Queries outside the table
/// are computed directly.
#[derive(Debug)]
pub struct CvaTable {
    alpha: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    values: Vec<f64>,
    second_only: Vec<f64>,
    fallback: CvaCache,
}

const TABLE_LN_M2: (f64, f64, usize) = (-6.907_755_278_982_137, 9.210_340_371_976_182, 57);
const TABLE_REL_K: (f64, f64, usize) = (0.0, 2.828_427_124_746_190_3, 21);

fn linspace((a, b, n): (f64, f64, usize)) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn catmull_rom(p: [f64; 4], t: f64) -> f64 {
    let [p0, p1, p2, p3] = p;
    0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t + (3.0 * (p1 - p2) + p3 - p0) * t * t * t)
}

/// Index of the cell containing `v` and the position inside it.
fn locate(grid: &[f64], v: f64) -> Option<(usize, f64)> {
    let n = grid.len();
    if !(v >= grid[0] && v <= grid[n - 1]) {
        return None;
    }
    let h = grid[1] - grid[0];
    let i = (((v - grid[0]) / h).floor() as usize).min(n - 2);
    Some((i, (v - grid[i]) / h))
}

fn kappa_star(m2: f64, c2: f64) -> f64 {
    t0(c2) / m2
}

impl CvaTable {
    pub fn build(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let x = linspace(TABLE_LN_M2);
        let y = linspace(TABLE_REL_K);
        let second_only = x
            .par_iter()
            .map(|&a| cva_chi(&MomentConstraints::second_only(a.exp())?, alpha))
            .collect::<Result<Vec<f64>>>()?;
        let cells: Vec<(usize, f64)> = (0..x.len()).flat_map(|i| y.iter().map(move |&b| (i, b))).collect();
        let values = cells
            .par_iter()
            .map(|&(i, b)| {
                let m2 = x[i].exp();
                let ks = kappa_star(m2, second_only[i]);
                if ks <= 1.0 || b <= 0.0 {
                    return Ok(second_only[i]);
                }
                cva_chi(&MomentConstraints::new(m2, Some(1.0 + (ks - 1.0) * (-b * b).exp()))?, alpha)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self { alpha, x, y, values, second_only, fallback: CvaCache::new(alpha) })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn node(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y.len() + j]
    }

    fn stencil(n: usize, i: usize) -> [usize; 4] {
        [i.saturating_sub(1), i, i + 1, (i + 2).min(n - 1)]
    }

    pub fn get(&self, m2: f64, kappa: Option<f64>) -> Result<f64> {
        let kappa = kappa.filter(|k| k.is_finite());
        let Some((i, tx)) = locate(&self.x, m2.ln()) else {
            return self.fallback.get(m2, kappa);
        };
        let xs = Self::stencil(self.x.len(), i);
        let c2 = catmull_rom(xs.map(|a| self.second_only[a]), tx);
        let Some(k) = kappa else {
            return Ok(c2);
        };
        let ks = kappa_star(m2, c2);
        if k >= ks {
            return Ok(c2);
        }
        let Some((j, ty)) = locate(&self.y, ((ks - 1.0).ln() - (k - 1.0).ln()).sqrt()) else {
            return self.fallback.get(m2, Some(k));
        };
        let ys = Self::stencil(self.y.len(), j);
        let col = xs.map(|a| catmull_rom(ys.map(|b| self.node(a, b)), ty));
        Ok(catmull_rom(col, tx).min(c2))
    }
}

/// Sums of coverage indicators and lengths for one replication, per method.
fn run_rep(
    design: &Design,
    methods: &[SimMethod],
    oracle_cva: &[f64],
    table: Option<&CvaTable>,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, f64)>> {
    let (units, theta, sigma_true) = design.simulate(rng)?;
    let n = units.len() as f64;
    let est = moments::estimate(&units, &MomentOptions::default())?;
    let target = est.delta[0];
    let (mu2_o, _) = design.oracle_moments();
    let z = z_crit(alpha);
    let exact = CvaCache::new(alpha);
    let lookup = |m2: f64, kappa: Option<f64>| -> Result<f64> {
        match table {
            Some(t) => t.get(m2, kappa),
            None => exact.get(m2, kappa),
        }
    };
    let mut out = Vec::with_capacity(methods.len());
    for (mi, m) in methods.iter().enumerate() {
        let (mu2, kappa) = if m.oracle { (mu2_o, None) } else { (est.mu2, Some(est.kappa)) };
        let (mut cover, mut len) = (0.0, 0.0);
        for (i, u) in units.iter().enumerate() {
            let s = if m.oracle { sigma_true[i] } else { u.sigma };
            let s2 = s * s;
            let w = mu2 / (mu2 + s2);
            let shrunk = target + w * (u.y - target);
            let (center, half) = match m.method {
                Method::Unshrunk => (u.y, z * s),
                Method::Parametric => (shrunk, z * w.sqrt() * s),
                Method::RobustMu2 | Method::RobustMu2Kappa => {
                    let c = if m.oracle && design.homoskedastic() {
                        oracle_cva[mi]
                    } else if m.oracle {
                        lookup(s2 / mu2, (m.method == Method::RobustMu2Kappa).then(|| design.oracle_moments().1))?
                    } else {
                        lookup(s2 / mu2, if m.method == Method::RobustMu2Kappa { kappa } else { None })?
                    };
                    (shrunk, c * w * s)
                }
                Method::OptimalRobust => {
                    return Err(Error::InvalidArgument("optimal shrinkage is not part of the coverage study".into()))
                }
            };
            if (center - theta[i]).abs() <= half {
                cover += 1.0;
            }
            len += 2.0 * half;
        }
        out.push((cover / n, len / n));
    }
    Ok(out)
}

/// Average coverage and length of each method in each design.
pub fn run_study(designs: &[Design], methods: &[SimMethod], cfg: &StudyConfig) -> Result<CoverageReport> {
    check_alpha(cfg.alpha)?;
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    pool.install(|| study_in_pool(designs, methods, cfg))
}

fn study_in_pool(designs: &[Design], methods: &[SimMethod], cfg: &StudyConfig) -> Result<CoverageReport> {
    // the reference rule is evaluated alongside the requested ones
    let reference = SimMethod { method: Method::RobustMu2Kappa, oracle: true };
    let mut all: Vec<SimMethod> = methods.to_vec();
    if !all.contains(&reference) {
        all.push(reference);
    }
    let ref_idx = all.iter().position(|m| *m == reference).expect("reference present");
    let table = if designs.iter().any(|d| !d.known_common_se()) { Some(CvaTable::build(cfg.alpha)?) } else { None };

    let mut rows = Vec::new();
    for (di, design) in designs.iter().enumerate() {
        let (mu2, kappa) = design.oracle_moments();
        let oracle_cva: Vec<f64> = all
            .iter()
            .map(|m| match (m.oracle, m.method) {
                (true, Method::RobustMu2) if design.homoskedastic() => cva_chi(&MomentConstraints::second_only(1.0 / mu2)?, cfg.alpha),
                (true, Method::RobustMu2Kappa) if design.homoskedastic() => {
                    cva_chi(&MomentConstraints::new(1.0 / mu2, Some(kappa.max(1.0)))?, cfg.alpha)
                }
                _ => Ok(f64::NAN),
            })
            .collect::<Result<_>>()?;
        let per_rep: Vec<Vec<(f64, f64)>> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = rep_rng(cfg.seed, di, rep);
                run_rep(design, &all, &oracle_cva, table.as_ref(), cfg.alpha, &mut rng)
            })
            .collect::<Result<_>>()?;
        let r = cfg.reps as f64;
        let mean_len = |k: usize| per_rep.iter().map(|v| v[k].1).sum::<f64>() / r;
        let ref_len = mean_len(ref_idx);
        for (k, m) in all.iter().enumerate() {
            if k == ref_idx && !methods.contains(&reference) {
                continue;
            }
            let cov = per_rep.iter().map(|v| v[k].0).sum::<f64>() / r;
            let var = if cfg.reps > 1 {
                per_rep.iter().map(|v| (v[k].0 - cov).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            let len = mean_len(k);
            rows.push(CoverageRow {
                design: design.label(),
                design_index: di,
                method: m.label(),
                coverage: cov,
                coverage_se: (var / r).sqrt(),
                avg_length: len,
                rel_length: len / ref_len,
            });
        }
    }
    Ok(CoverageReport { reps: cfg.reps, rows })
}

/// Result of a selection-conditional coverage experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionCoverage {
    pub chi: f64,
    pub mu2_cond: f64,
    pub coverage: f64,
    pub coverage_se: f64,
}

/// Coverage, among selected units, of `w Y +- chi w sigma` with `chi` calibrated
/// at the true conditional second moment. `w = E[theta^2] / (E[theta^2] + sigma^2)`.
pub fn selection_coverage(
    dist: &ThetaDistribution,
    window: &SelectionWindow,
    n: usize,
    cfg: &StudyConfig,
) -> Result<SelectionCoverage> {
    let (pts, probs) = dist
        .support()
        .ok_or_else(|| Error::InvalidArgument("selection experiment needs a discrete effect distribution".into()))?;
    let sigma = 1.0;
    let m2_all: f64 = pts.iter().zip(&probs).map(|(t, p)| p * t * t).sum();
    let w = m2_all / (m2_all + sigma * sigma);
    let mu2_cond = conditional_second_moment(&pts, &probs, window, sigma);
    let grid = crate::nonlinear::selection::default_selection_grid(m2_all, sigma, cfg.alpha)?;
    let chi = selection_cva(mu2_cond, window, w, sigma, cfg.alpha, &grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let per_rep: Vec<Option<f64>> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = rep_rng(cfg.seed, 0, rep);
                let (mut sel, mut hit) = (0usize, 0usize);
                for _ in 0..n {
                    let th = dist.sample(&mut rng);
                    let y = th + sigma * rng.sample::<f64, _>(StandardNormal);
                    if window.contains(y) {
                        sel += 1;
                        if (w * y - th).abs() <= chi * w * sigma {
                            hit += 1;
                        }
                    }
                }
                (sel > 0).then(|| hit as f64 / sel as f64)
            })
            .collect()
    });
    let vals: Vec<f64> = per_rep.into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(Error::InvalidArgument("no unit was ever selected".into()));
    }
    let r = vals.len() as f64;
    let cov = vals.iter().sum::<f64>() / r;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - cov).powi(2)).sum::<f64>() / (r - 1.0) } else { 0.0 };
    Ok(SelectionCoverage { chi, mu2_cond, coverage: cov, coverage_se: (var / r).sqrt() })
}
