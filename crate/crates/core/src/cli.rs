//! Command-line front end: CSV ingest, configuration and the five subcommands.
//!
//! Settings resolve as command-line flag, then `--config` file (`key = value`
//! lines, `#` comments), then built-in default. The worker count additionally
//! falls back to `EBCI_WORKERS` before the default.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::ebci::{self, average_power, EbciOutput, FitOptions, Method};
use crate::error::Error;
use crate::moments::{MomentEstimates, MomentOptions, MomentVariant, UnitRecord};
use crate::rho::{cva_chi, cva_parametric, MomentConstraints};
use crate::sim::{self, Design, ErrorKind, HeteroDesign, PanelDesign, SimMethod, StudyConfig, ThetaKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "EBCI_WORKERS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidAlpha(_) => CliError::config(e.to_string()),
            _ => CliError::numeric(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ebci", version, about = "Robust empirical Bayes confidence intervals")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// Nominal non-coverage.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Interval rule: robust_mu2, robust_mu2_kappa, parametric, optimal_robust, unshrunk.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Precision weights: uniform, inverse_variance or column (the `weight` column).
    #[arg(long, global = true)]
    pub weights: Option<String>,
    /// Moment estimator: pmt, fplib, nn or uc.
    #[arg(long, global = true)]
    pub moments: Option<String>,
    /// Neighbor count for `--moments nn`; cross-validated when absent.
    #[arg(long = "nn-j", global = true)]
    pub nn_j: Option<usize>,
    /// Comma-separated neighbor counts for cross-validation.
    #[arg(long = "cv-grid", global = true)]
    pub cv_grid: Option<String>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// File of `key = value` settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Intervals for every row of an input CSV.
    Fit,
    /// Robust critical values at given `m2` and kurtosis bounds.
    Cva {
        /// Comma-separated `m2` values.
        #[arg(long)]
        m2: String,
        /// Comma-separated kurtosis bounds; `inf` for the second moment only.
        #[arg(long, default_value = "inf")]
        kappa: String,
    },
    /// Critical value curves over a log-spaced `m2` grid.
    Curves {
        #[arg(long = "m2-min", default_value_t = 0.01)]
        m2_min: f64,
        #[arg(long = "m2-max", default_value_t = 100.0)]
        m2_max: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        /// Comma-separated kurtosis bounds; `inf` is always included.
        #[arg(long, default_value = "2,3,10")]
        kappas: String,
    },
    /// Average power of the robust test against the z-test on a grid of `d` and `w`.
    Power {
        #[arg(long, default_value = "inf")]
        kappa: String,
        #[arg(long = "d-max", default_value_t = 6.0)]
        d_max: f64,
        #[arg(long = "d-points", default_value_t = 61)]
        d_points: usize,
        /// Comma-separated shrinkage factors in (0, 1).
        #[arg(long = "w-grid", default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        w_grid: String,
    },
    /// Monte Carlo coverage study.
    Simulate(SimulateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Cva { .. } => "cva",
            Command::Curves { .. } => "curves",
            Command::Power { .. } => "power",
            Command::Simulate(_) => "simulate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    Uniform,
    InverseVariance,
    Column,
}

impl FromStr for WeightScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "inverse_variance" => Ok(Self::InverseVariance),
            "column" => Ok(Self::Column),
            _ => Err(format!("unknown weights '{s}' (expected uniform, inverse_variance or column)")),
        }
    }
}

fn parse_variant(s: &str) -> Result<MomentVariant, String> {
    match s {
        "pmt" => Ok(MomentVariant::Pmt),
        "fplib" => Ok(MomentVariant::Fplib),
        "nn" => Ok(MomentVariant::Nn),
        "uc" => Ok(MomentVariant::Uc),
        _ => Err(format!("unknown moments '{s}' (expected pmt, fplib, nn or uc)")),
    }
}

fn variant_name(v: MomentVariant) -> &'static str {
    match v {
        MomentVariant::Uc => "uc",
        MomentVariant::Pmt => "pmt",
        MomentVariant::Fplib => "fplib",
        MomentVariant::Nn => "nn",
    }
}

/// Fully resolved settings shared by all subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub alpha: f64,
    pub method: Method,
    /// `None` means: the `weight` column when present, uniform otherwise.
    pub weights: Option<WeightScheme>,
    pub moment_variant: MomentVariant,
    pub nn_j: Option<usize>,
    pub cv_grid: Option<Vec<usize>>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    /// Remaining config-file entries, read by the subcommand.
    extra: HashMap<String, String>,
}

const COMMON_KEYS: [&str; 10] =
    ["alpha", "method", "weights", "moments", "nn_j", "cv_grid", "input", "output", "seed", "workers"];
const SIMULATE_KEYS: [&str; 7] = ["n", "t", "errors", "reps", "methods", "theta", "snr"];

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> CliResult<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('-', "_");
        if !COMMON_KEYS.contains(&key.as_str()) && !SIMULATE_KEYS.contains(&key.as_str()) {
            return Err(CliError::config(format!("config line {}: unknown key '{}'", i + 1, k.trim())));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn from_config<T: FromStr>(map: &HashMap<String, String>, key: &str) -> CliResult<Option<T>>
where
    T::Err: Display,
{
    map.get(key)
        .map(|v| v.parse::<T>().map_err(|e| CliError::config(format!("config key '{key}': {e}"))))
        .transpose()
}

fn pick<T: FromStr>(flag: Option<T>, map: &HashMap<String, String>, key: &str) -> CliResult<Option<T>>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => from_config(map, key),
    }
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| CliError::config(format!("{what}: cannot parse '{p}': {e}"))))
        .collect()
}

/// `inf` (or `infinity`) stands for no kurtosis constraint.
fn parse_kappa_list(s: &str) -> CliResult<Vec<Option<f64>>> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            if p.eq_ignore_ascii_case("inf") || p.eq_ignore_ascii_case("infinity") {
                return Ok(None);
            }
            match p.parse::<f64>() {
                Ok(k) if k >= 1.0 && k.is_finite() => Ok(Some(k)),
                _ => Err(CliError::config(format!("kappa must be a number >= 1 or 'inf', got '{p}'"))),
            }
        })
        .collect()
}

fn kappa_str(k: Option<f64>) -> String {
    k.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

fn default_workers() -> CliResult<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

impl RunConfig {
    /// Merge flags, the optional config file and defaults, and validate paths.
    pub fn resolve(common: &CommonArgs, command: &Command) -> CliResult<Self> {
        let map = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                parse_config_file(&text)?
            }
            None => HashMap::new(),
        };
        let alpha = pick(common.alpha, &map, "alpha")?.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let method_s = pick(common.method.clone(), &map, "method")?.unwrap_or_else(|| "robust_mu2_kappa".into());
        let method = Method::parse(&method_s).ok_or_else(|| CliError::config(format!("unknown method '{method_s}'")))?;
        let weights = pick(common.weights.clone(), &map, "weights")?
            .map(|s| s.parse::<WeightScheme>().map_err(CliError::config))
            .transpose()?;
        let variant_s = pick(common.moments.clone(), &map, "moments")?.unwrap_or_else(|| "pmt".into());
        let moment_variant = parse_variant(&variant_s).map_err(CliError::config)?;
        let nn_j = pick(common.nn_j, &map, "nn_j")?;
        if nn_j == Some(0) {
            return Err(CliError::config("nn-j must be positive"));
        }
        let cv_grid = pick(common.cv_grid.clone(), &map, "cv_grid")?
            .map(|s| parse_list::<usize>(&s, "cv-grid"))
            .transpose()?;
        let input = pick(common.input.clone(), &map, "input")?;
        let output = pick(common.output.clone(), &map, "output")?;
        let seed = pick(common.seed, &map, "seed")?.unwrap_or(20_240_601);
        let workers = match pick(common.workers, &map, "workers")? {
            Some(w) => w,
            None => default_workers()?,
        };
        if workers == 0 {
            return Err(CliError::config("workers must be positive"));
        }

        if matches!(command, Command::Fit) && input.is_none() {
            return Err(CliError::config("fit needs --input"));
        }
        if let Some(p) = &input {
            if !p.is_file() {
                return Err(CliError::input(format!("input file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &output {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !dir.is_dir() {
                return Err(CliError::config(format!("output directory {} does not exist", dir.display())));
            }
        }
        Ok(Self {
            command: command.name().to_string(),
            alpha,
            method,
            weights,
            moment_variant,
            nn_j,
            cv_grid,
            input,
            output,
            seed,
            workers,
            extra: map,
        })
    }

    fn moment_options(&self) -> MomentOptions {
        MomentOptions { variant: self.moment_variant, nn_j: self.nn_j, cv_grid: self.cv_grid.clone().unwrap_or_default() }
    }

    fn pool(&self) -> CliResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CliError::numeric(format!("cannot start worker pool: {e}")))
    }
}

/// Rows read from an input CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTable {
    pub y: Vec<f64>,
    pub se: Vec<f64>,
    /// Covariates `x1..xk` per row, without the intercept.
    pub x: Vec<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
}

fn parse_cell(s: &str, column: &str, line: u64) -> CliResult<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| CliError::input(format!("line {line}, column '{column}': cannot parse '{s}' as a number")))
}

/// Read the `y, se, [x1..xk], [weight]` schema. Errors name the column and line.
pub fn read_input<R: io::Read>(reader: R) -> CliResult<InputTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::input(format!("cannot read header row: {e}")))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let iy = find("y").ok_or_else(|| CliError::input("line 1: missing required column 'y'"))?;
    let ise = find("se").ok_or_else(|| CliError::input("line 1: missing required column 'se'"))?;
    let iw = find("weight");
    let mut xcols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()).map(|k| (k, i)))
        .collect();
    xcols.sort();
    for (pos, &(k, _)) in xcols.iter().enumerate() {
        if k != pos + 1 {
            return Err(CliError::input(format!("line 1: covariate columns must be x1..xk, column 'x{}' is missing", pos + 1)));
        }
    }

    let mut t = InputTable { y: Vec::new(), se: Vec::new(), x: Vec::new(), weight: iw.map(|_| Vec::new()) };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::input(format!("line {line}: malformed row: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize, name: &str| -> CliResult<f64> {
            let cell = rec.get(i).ok_or_else(|| CliError::input(format!("line {line}, column '{name}': missing value")))?;
            parse_cell(cell, name, line)
        };
        let y = get(iy, "y")?;
        let se = get(ise, "se")?;
        if !y.is_finite() {
            return Err(CliError::input(format!("line {line}, column 'y': value must be finite")));
        }
        if !(se > 0.0 && se.is_finite()) {
            return Err(CliError::input(format!("line {line}, column 'se': standard error must be positive")));
        }
        let mut xs = Vec::with_capacity(xcols.len());
        for &(k, i) in &xcols {
            let v = get(i, &format!("x{k}"))?;
            if !v.is_finite() {
                return Err(CliError::input(format!("line {line}, column 'x{k}': value must be finite")));
            }
            xs.push(v);
        }
        if let (Some(i), Some(w)) = (iw, t.weight.as_mut()) {
            let v = get(i, "weight")?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::input(format!("line {line}, column 'weight': weight must be finite and >= 0")));
            }
            w.push(v);
        }
        t.y.push(y);
        t.se.push(se);
        t.x.push(xs);
    }
    if t.y.is_empty() {
        return Err(CliError::input("input has no data rows"));
    }
    Ok(t)
}

/// Unit records with an intercept prepended and weights normalized to sum to one.
pub fn build_units(table: &InputTable, scheme: Option<WeightScheme>) -> CliResult<Vec<UnitRecord>> {
    let n = table.y.len();
    let scheme = scheme.unwrap_or(if table.weight.is_some() { WeightScheme::Column } else { WeightScheme::Uniform });
    let raw: Vec<f64> = match scheme {
        WeightScheme::Uniform => vec![1.0; n],
        WeightScheme::InverseVariance => table.se.iter().map(|s| 1.0 / (s * s)).collect(),
        WeightScheme::Column => table
            .weight
            .clone()
            .ok_or_else(|| CliError::input("line 1: --weights column needs a 'weight' column"))?,
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(CliError::input("column 'weight': weights must have a positive finite sum"));
    }
    (0..n)
        .map(|i| {
            let mut x = Vec::with_capacity(table.x[i].len() + 1);
            x.push(1.0);
            x.extend_from_slice(&table.x[i]);
            UnitRecord::new(table.y[i], table.se[i], x, raw[i] / total)
                .map_err(|e| CliError::input(format!("line {}: {e}", i + 2)))
        })
        .collect()
}

fn open_output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::config(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn io_err(e: impl Display) -> CliError {
    CliError::input(format!("write failed: {e}"))
}

pub const FIT_COLUMNS: [&str; 13] = [
    "row",
    "y",
    "se",
    "theta_hat",
    "w_eb",
    "cva",
    "lower",
    "upper",
    "half_length",
    "method",
    "param_max_noncov",
    "rule_of_thumb_ok",
    "error",
];

/// Write the fit report: `#` header lines with the moment estimates, then one row per unit.
pub fn write_fit<W: Write>(
    out: W,
    cfg: &RunConfig,
    units: &[UnitRecord],
    rows: &[EbciOutput],
    est: &MomentEstimates,
) -> CliResult<()> {
    let mut out = out;
    writeln!(out, "# method={}", cfg.method.name()).map_err(io_err)?;
    writeln!(out, "# alpha={}", cfg.alpha).map_err(io_err)?;
    writeln!(out, "# moments={}", variant_name(est.variant)).map_err(io_err)?;
    writeln!(out, "# mu2={}", est.mu2).map_err(io_err)?;
    writeln!(out, "# kappa={}", est.kappa).map_err(io_err)?;
    writeln!(out, "# delta={}", est.delta.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";"))
        .map_err(io_err)?;
    for w in &est.warnings {
        writeln!(out, "# warning={}", w.replace('\n', " ")).map_err(io_err)?;
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(FIT_COLUMNS).map_err(io_err)?;
    for (i, (u, o)) in units.iter().zip(rows).enumerate() {
        wtr.write_record([
            (i + 1).to_string(),
            u.y.to_string(),
            u.sigma.to_string(),
            o.theta_hat.to_string(),
            o.w_eb.to_string(),
            o.cva.to_string(),
            o.lower.to_string(),
            o.upper.to_string(),
            o.half_length.to_string(),
            o.method.name().to_string(),
            o.param_max_noncov.to_string(),
            o.rule_of_thumb_ok.to_string(),
            o.error.clone().unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    wtr.flush().map_err(io_err)
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<()> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::config("fit needs --input"))?;
    let file = File::open(path).map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
    let table = read_input(file)?;
    let units = build_units(&table, cfg.weights)?;
    let opts = FitOptions { alpha: cfg.alpha, method: cfg.method, moments: cfg.moment_options() };
    let (rows, est) = cfg.pool()?.install(|| ebci::fit(&units, &opts))?;
    write_fit(open_output(&cfg.output)?, cfg, &units, &rows, &est)
}

fn cmd_cva(cfg: &RunConfig, m2: &str, kappa: &str) -> CliResult<()> {
    let m2s = parse_list::<f64>(m2, "m2")?;
    if let Some(bad) = m2s.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
        return Err(CliError::config(format!("m2 must be finite and >= 0, got {bad}")));
    }
    let kappas = parse_kappa_list(kappa)?;
    let pool = cfg.pool()?;
    let mut wtr = csv::Writer::from_writer(open_output(&cfg.output)?);
    wtr.write_record(["m2", "kappa", "cva", "noncoverage", "t0"]).map_err(io_err)?;
    for &m in &m2s {
        for &k in &kappas {
            let res = pool.install(|| crate::rho::cva(&MomentConstraints::new(m, k)?, cfg.alpha))?;
            wtr.write_record([
                m.to_string(),
                kappa_str(k),
                res.chi.to_string(),
                res.noncoverage.to_string(),
                res.diagnostics.t0.to_string(),
            ])
            .map_err(io_err)?;
        }
    }
    wtr.flush().map_err(io_err)
}

/// Rows of the curve report: `m2 = 0` first, then `points` log-spaced values.
pub fn curve_rows(
    alpha: f64,
    m2_min: f64,
    m2_max: f64,
    points: usize,
    kappas: &[Option<f64>],
) -> CliResult<Vec<(f64, Option<f64>, f64, f64)>> {
    if !(m2_min > 0.0 && m2_max > m2_min && m2_max.is_finite()) || points < 2 {
        return Err(CliError::config("curves need 0 < m2-min < m2-max and at least 2 points"));
    }
    let mut ks: Vec<Option<f64>> = kappas.iter().copied().filter(|k| k.is_some()).collect();
    ks.push(None);
    let ratio = m2_max / m2_min;
    let mut grid = vec![0.0];
    grid.extend((0..points).map(|i| m2_min * ratio.powf(i as f64 / (points - 1) as f64)));
    let mut rows = Vec::with_capacity(grid.len() * ks.len());
    for &m in &grid {
        let param = cva_parametric(m, alpha)?;
        for &k in &ks {
            rows.push((m, k, cva_chi(&MomentConstraints::new(m, k)?, alpha)?, param));
        }
    }
    Ok(rows)
}

fn cmd_curves(cfg: &RunConfig, m2_min: f64, m2_max: f64, points: usize, kappas: &str) -> CliResult<()> {
    let ks = parse_kappa_list(kappas)?;
    let rows = cfg.pool()?.install(|| curve_rows(cfg.alpha, m2_min, m2_max, points, &ks))?;
    let mut wtr = csv::Writer::from_writer(open_output(&cfg.output)?);
    wtr.write_record(["m2", "kappa", "cva", "cva_parametric"]).map_err(io_err)?;
    for (m, k, c, p) in rows {
        wtr.write_record([m.to_string(), kappa_str(k), c.to_string(), p.to_string()]).map_err(io_err)?;
    }
    wtr.flush().map_err(io_err)
}

/// `(d, w, robust power, z-test power)` over the grid.
pub fn power_grid(
    alpha: f64,
    kappa: Option<f64>,
    d_max: f64,
    d_points: usize,
    ws: &[f64],
) -> CliResult<Vec<(f64, f64, f64, f64)>> {
    if !(d_max > 0.0 && d_max.is_finite()) || d_points < 2 {
        return Err(CliError::config("power needs d-max > 0 and at least 2 d-points"));
    }
    if let Some(bad) = ws.iter().find(|w| !(**w > 0.0 && **w < 1.0)) {
        return Err(CliError::config(format!("shrinkage factors must lie in (0, 1), got {bad}")));
    }
    let mut rows = Vec::new();
    for &w in ws {
        for i in 0..d_points {
            let d = d_max * i as f64 / (d_points - 1) as f64;
            let (rp, zp) = average_power(d, w, alpha, kappa)?;
            rows.push((d, w, rp, zp));
        }
    }
    Ok(rows)
}

fn cmd_power(cfg: &RunConfig, kappa: &str, d_max: f64, d_points: usize, w_grid: &str) -> CliResult<()> {
    let k = match parse_kappa_list(kappa)?.as_slice() {
        [k] => *k,
        _ => return Err(CliError::config("power takes a single kappa")),
    };
    let ws = parse_list::<f64>(w_grid, "w-grid")?;
    let rows = cfg.pool()?.install(|| power_grid(cfg.alpha, k, d_max, d_points, &ws))?;
    let mut wtr = csv::Writer::from_writer(open_output(&cfg.output)?);
    wtr.write_record(["d", "w", "power_robust", "power_z", "difference"]).map_err(io_err)?;
    for (d, w, rp, zp) in rows {
        wtr.write_record([d.to_string(), w.to_string(), rp.to_string(), zp.to_string(), (rp - zp).to_string()])
            .map_err(io_err)?;
    }
    wtr.flush().map_err(io_err)
}

#[derive(Debug, Clone, Args, Default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Panel length, or `inf` for exactly normal estimates with known standard errors.
    #[arg(long)]
    pub t: Option<String>,
    /// Panel errors: normal or chi2.
    #[arg(long)]
    pub errors: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated rules; a `_oracle` suffix uses the true moments.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated effect distributions for the panel designs.
    #[arg(long)]
    pub theta: Option<String>,
    /// Comma-separated signal-to-noise ratios.
    #[arg(long)]
    pub snr: Option<String>,
}

/// Designs and rules for a simulate run. With `--input` the designs are
/// heteroskedastic ones built from the `theta_hat, se` seed file.
fn simulate_plan(cfg: &RunConfig, args: &SimulateArgs) -> CliResult<(Vec<Design>, Vec<SimMethod>, usize)> {
    let m = &cfg.extra;
    let n = pick(args.n, m, "n")?.unwrap_or(500);
    let reps = pick(args.reps, m, "reps")?.unwrap_or(1000);
    if reps == 0 {
        return Err(CliError::config("reps must be positive"));
    }
    let t_s = pick(args.t.clone(), m, "t")?.unwrap_or_else(|| "inf".into());
    let t = if t_s.eq_ignore_ascii_case("inf") {
        None
    } else {
        match t_s.parse::<usize>() {
            Ok(t) if t >= 2 => Some(t),
            _ => return Err(CliError::config(format!("t must be an integer >= 2 or 'inf', got '{t_s}'"))),
        }
    };
    let err_s = pick(args.errors.clone(), m, "errors")?.unwrap_or_else(|| "normal".into());
    let err = ErrorKind::parse(&err_s).ok_or_else(|| CliError::config(format!("unknown errors '{err_s}'")))?;
    let methods = match pick(args.methods.clone(), m, "methods")? {
        Some(s) => s
            .split(',')
            .map(|p| SimMethod::parse(p.trim()).ok_or_else(|| CliError::config(format!("unknown simulation method '{p}'"))))
            .collect::<CliResult<Vec<_>>>()?,
        None => SimMethod::standard(),
    };
    let snrs = match pick(args.snr.clone(), m, "snr")? {
        Some(s) => parse_list::<f64>(&s, "snr")?,
        None => vec![0.1, 0.5, 1.0, 2.0],
    };
    let designs = if let Some(path) = &cfg.input {
        snrs.iter()
            .map(|&s| HeteroDesign::from_csv(path, s).map(Design::Hetero))
            .collect::<Result<Vec<_>, Error>>()
            .map_err(|e| CliError::input(e.to_string()))?
    } else {
        let kinds = match pick(args.theta.clone(), m, "theta")? {
            Some(s) => s
                .split(',')
                .map(|p| ThetaKind::parse(p.trim()).ok_or_else(|| CliError::config(format!("unknown theta '{p}'"))))
                .collect::<CliResult<Vec<_>>>()?,
            None => ThetaKind::ALL.to_vec(),
        };
        let mut v = Vec::new();
        for kind in kinds {
            for &s in &snrs {
                v.push(Design::Panel(PanelDesign::new(n, t, err, kind, s, cfg.alpha).map_err(|e| CliError::config(e.to_string()))?));
            }
        }
        v
    };
    Ok((designs, methods, reps))
}

/// Coverage study as CSV text. The text does not depend on the worker count.
pub fn simulate_report(cfg: &RunConfig, args: &SimulateArgs) -> CliResult<String> {
    let (designs, methods, reps) = simulate_plan(cfg, args)?;
    let study = StudyConfig { reps, workers: cfg.workers, seed: cfg.seed, alpha: cfg.alpha };
    let report = sim::run_study(&designs, &methods, &study)?;
    let mut buf = Vec::new();
    writeln!(buf, "# reps={reps}").map_err(io_err)?;
    writeln!(buf, "# seed={}", cfg.seed).map_err(io_err)?;
    writeln!(buf, "# alpha={}", cfg.alpha).map_err(io_err)?;
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        wtr.write_record(["design", "design_index", "method", "coverage", "coverage_se", "avg_length", "rel_length"])
            .map_err(io_err)?;
        for r in &report.rows {
            wtr.write_record([
                r.design.clone(),
                r.design_index.to_string(),
                r.method.clone(),
                r.coverage.to_string(),
                r.coverage_se.to_string(),
                r.avg_length.to_string(),
                r.rel_length.to_string(),
            ])
            .map_err(io_err)?;
        }
        wtr.flush().map_err(io_err)?;
    }
    String::from_utf8(buf).map_err(io_err)
}

fn cmd_simulate(cfg: &RunConfig, args: &SimulateArgs) -> CliResult<()> {
    let text = simulate_report(cfg, args)?;
    let mut out = open_output(&cfg.output)?;
    out.write_all(text.as_bytes()).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = RunConfig::resolve(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Fit => cmd_fit(&cfg),
        Command::Cva { m2, kappa } => cmd_cva(&cfg, m2, kappa),
        Command::Curves { m2_min, m2_max, points, kappas } => cmd_curves(&cfg, *m2_min, *m2_max, *points, kappas),
        Command::Power { kappa, d_max, d_points, w_grid } => cmd_power(&cfg, kappa, *d_max, *d_points, w_grid),
        Command::Simulate(args) => cmd_simulate(&cfg, args),
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
