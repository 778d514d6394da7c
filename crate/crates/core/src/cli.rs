//! Batch front end: JSON problem configs, the `density`, `capacity`,
//! `mc-compare` and `moments` commands, and atomic CSV/JSON emitters.
//!
//! A config names one model and its parameters. Block indices are 1-based
//! and complex values are written either as a number or as `[re, im]`:
//!
//! ```json
//! {
//!   "model": "isi", "K": 4, "L": 4,
//!   "grid": {"xmin": 0.0, "xmax": 6.0, "points": 512},
//!   "snr": [0.1, 1.0, 10.0],
//!   "mc": {"N": [25, 50, 100], "realizations": 100, "seed": 7}
//! }
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::covariance::{isi_covariance, validate_covariance, CovarianceSpec, SigmaEntry, TauEntry};
use crate::error::Error;
use crate::linalg::CMat;
use crate::nonsep::{fading_law, CorrelationFamily};
use crate::oracle::{histogram, ks_distance, nc2_trace_moment, Sampler};
use crate::solver::{Law, SolverConfig, POSITIVITY_TOL};
use crate::spectrum::{
    capacity, cdf, compute_density, moments_from_density, DensityOptions, DensityReport, DEFAULT_POINTS,
};

/// Relative agreement required between recursion and density moments.
pub const MOMENT_REL_TOL: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerical(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Process exit status: 1 for numerical and output failures, 2 for
    /// usage and config errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) | CliError::Io { .. } => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse_error",
            CliError::Validation { .. } => "validation_error",
            CliError::Io { .. } => "io_error",
            CliError::Numerical(_) => "numerical_error",
            CliError::Usage(_) => "usage_error",
        }
    }

    /// Machine-readable description printed on failure.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        match self {
            CliError::Parse { line, column, .. } => {
                v["line"] = json!(line);
                v["column"] = json!(column);
            }
            CliError::Validation { field, .. } => v["field"] = json!(field),
            _ => {}
        }
        v
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

/// The model and its parameters, with 0-based indices.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    SelfAdjoint { d: usize, sigma: Vec<SigmaEntry> },
    HhStar { a: usize, b: usize, tau: Vec<TauEntry> },
    Isi { k: usize, l: usize, taps: Vec<f64> },
    Rectangular { alpha: Vec<f64>, sigma: Vec<SigmaEntry> },
    Nonsep { psi: Vec<CMat>, psi_hat: Vec<CMat> },
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::SelfAdjoint { .. } => "selfadjoint",
            ModelConfig::HhStar { .. } => "hh_star",
            ModelConfig::Isi { .. } => "isi",
            ModelConfig::Rectangular { .. } => "rectangular",
            ModelConfig::Nonsep { .. } => "nonsep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Both ends or neither; unset means the support is found automatically.
    pub range: Option<(f64, f64)>,
    pub points: usize,
    pub epsilon: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            range: None,
            points: DEFAULT_POINTS,
            epsilon: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    /// Block sizes `N`.
    pub sizes: Vec<usize>,
    pub realizations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    pub snr: Option<Vec<f64>>,
    pub mc: Option<McConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Scalar {
    Real(f64),
    Complex([f64; 2]),
}

impl Scalar {
    fn value(self) -> Complex64 {
        match self {
            Scalar::Real(x) => Complex64::new(x, 0.0),
            Scalar::Complex([re, im]) => Complex64::new(re, im),
        }
    }

    fn from_value(v: Complex64) -> Self {
        Scalar::Complex([v.re, v.im])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(skip_serializing_if = "Option::is_none")]
    xmin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xmax: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    #[serde(rename = "N")]
    n: Option<OneOrMany>,
    #[serde(skip_serializing_if = "Option::is_none")]
    realizations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

type RawSigma = (usize, usize, usize, usize, Scalar);
type RawTau = (usize, usize, usize, usize, f64);
type RawMatrix = Vec<Vec<Scalar>>;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<Vec<RawSigma>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<Vec<RawTau>>,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    taps: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi: Option<Vec<RawMatrix>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi_hat: Option<Vec<RawMatrix>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<RawGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<SolverConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc: Option<RawMc>,
}

impl RawConfig {
    /// Names of the model parameter keys that are present.
    fn present_params(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let mut note = |present: bool, name: &'static str| {
            if present {
                keys.push(name);
            }
        };
        note(self.d.is_some(), "d");
        note(self.sigma.is_some(), "sigma");
        note(self.a.is_some(), "a");
        note(self.b.is_some(), "b");
        note(self.tau.is_some(), "tau");
        note(self.k.is_some(), "K");
        note(self.l.is_some(), "L");
        note(self.taps.is_some(), "taps");
        note(self.alpha.is_some(), "alpha");
        note(self.psi.is_some(), "psi");
        note(self.psi_hat.is_some(), "psi_hat");
        keys
    }
}

fn required<T>(value: Option<T>, field: &str) -> Result<T, CliError> {
    value.ok_or_else(|| invalid(field, "is required"))
}

fn index(value: usize, bound: usize, field: &str) -> Result<usize, CliError> {
    if value == 0 || value > bound {
        return Err(invalid(field, format!("index {value} is outside 1..={bound}")));
    }
    Ok(value - 1)
}

fn finite(value: f64, field: &str) -> Result<f64, CliError> {
    if !value.is_finite() {
        return Err(invalid(field, "must be finite"));
    }
    Ok(value)
}

fn sigma_entries(raw: Vec<RawSigma>, d: usize) -> Result<Vec<SigmaEntry>, CliError> {
    raw.into_iter()
        .enumerate()
        .map(|(n, (i, j, k, l, v))| {
            let field = format!("sigma[{n}]");
            let value = v.value();
            finite(value.re, &field)?;
            finite(value.im, &field)?;
            Ok(SigmaEntry::new(
                index(i, d, &field)?,
                index(j, d, &field)?,
                index(k, d, &field)?,
                index(l, d, &field)?,
                value,
            ))
        })
        .collect()
}

fn matrices(raw: Vec<RawMatrix>, field: &str) -> Result<Vec<CMat>, CliError> {
    raw.into_iter()
        .enumerate()
        .map(|(s, rows)| {
            let name = format!("{field}[{s}]");
            let n = rows.len();
            if n == 0 || rows.iter().any(|r| r.len() != n) {
                return Err(invalid(
                    &name,
                    "must be a nonempty square matrix given as a list of rows",
                ));
            }
            let mut m = CMat::zeros(n, n);
            for (i, row) in rows.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let v = v.value();
                    finite(v.re, &name)?;
                    finite(v.im, &name)?;
                    m[(i, j)] = v;
                }
            }
            Ok(m)
        })
        .collect()
}

fn model_from_raw(raw: &mut RawConfig) -> Result<ModelConfig, CliError> {
    let name = required(raw.model.take(), "model")?;
    let allowed: &[&str] = match name.as_str() {
        "selfadjoint" => &["d", "sigma"],
        "hh_star" => &["a", "b", "tau"],
        "isi" => &["K", "L", "taps"],
        "rectangular" => &["alpha", "sigma"],
        "nonsep" => &["psi", "psi_hat"],
        other => {
            return Err(invalid(
                "model",
                format!("unknown model `{other}`; expected selfadjoint, hh_star, isi, rectangular or nonsep"),
            ))
        }
    };
    if let Some(extra) = raw.present_params().into_iter().find(|k| !allowed.contains(k)) {
        return Err(invalid(extra, format!("is not a parameter of model `{name}`")));
    }
    let model = match name.as_str() {
        "selfadjoint" => {
            let d = required(raw.d, "d")?;
            if d == 0 {
                return Err(invalid("d", "must be positive"));
            }
            ModelConfig::SelfAdjoint {
                d,
                sigma: sigma_entries(required(raw.sigma.take(), "sigma")?, d)?,
            }
        }
        "hh_star" => {
            let a = required(raw.a, "a")?;
            let b = required(raw.b, "b")?;
            if a == 0 {
                return Err(invalid("a", "must be positive"));
            }
            if b == 0 {
                return Err(invalid("b", "must be positive"));
            }
            let tau = required(raw.tau.take(), "tau")?
                .into_iter()
                .enumerate()
                .map(|(n, (i, k, j, l, v))| {
                    let field = format!("tau[{n}]");
                    Ok(TauEntry::new(
                        index(i, a, &field)?,
                        index(k, b, &field)?,
                        index(j, a, &field)?,
                        index(l, b, &field)?,
                        finite(v, &field)?,
                    ))
                })
                .collect::<Result<_, CliError>>()?;
            ModelConfig::HhStar { a, b, tau }
        }
        "isi" => {
            let k = required(raw.k, "K")?;
            let l = required(raw.l, "L")?;
            if k == 0 {
                return Err(invalid("K", "must be positive"));
            }
            if l == 0 {
                return Err(invalid("L", "must be positive"));
            }
            let taps = raw.taps.take().unwrap_or_else(|| vec![1.0; l]);
            if taps.len() != l {
                return Err(invalid(
                    "taps",
                    format!("expected {l} tap variances, got {}", taps.len()),
                ));
            }
            if taps.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(invalid("taps", "tap variances must be finite and nonnegative"));
            }
            ModelConfig::Isi { k, l, taps }
        }
        "rectangular" => {
            let alpha = required(raw.alpha.take(), "alpha")?;
            if alpha.is_empty() {
                return Err(invalid("alpha", "must be nonempty"));
            }
            let d = alpha.len();
            ModelConfig::Rectangular {
                alpha,
                sigma: sigma_entries(required(raw.sigma.take(), "sigma")?, d)?,
            }
        }
        _ => ModelConfig::Nonsep {
            psi: matrices(required(raw.psi.take(), "psi")?, "psi")?,
            psi_hat: matrices(required(raw.psi_hat.take(), "psi_hat")?, "psi_hat")?,
        },
    };
    Ok(model)
}

fn grid_from_raw(raw: Option<RawGrid>) -> Result<GridConfig, CliError> {
    let raw = raw.unwrap_or_default();
    let range = match (raw.xmin, raw.xmax) {
        (None, None) => None,
        (Some(lo), Some(hi)) => {
            finite(lo, "grid.xmin")?;
            finite(hi, "grid.xmax")?;
            if hi <= lo {
                return Err(invalid("grid.xmax", "must exceed grid.xmin"));
            }
            Some((lo, hi))
        }
        (Some(_), None) => return Err(invalid("grid.xmax", "is required when grid.xmin is set")),
        (None, Some(_)) => return Err(invalid("grid.xmin", "is required when grid.xmax is set")),
    };
    let points = raw.points.unwrap_or(DEFAULT_POINTS);
    if points < 2 {
        return Err(invalid("grid.points", "must be at least 2"));
    }
    if let Some(eps) = raw.epsilon {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("grid.epsilon", "must be positive"));
        }
    }
    Ok(GridConfig {
        range,
        points,
        epsilon: raw.epsilon,
    })
}

fn mc_from_raw(raw: Option<RawMc>) -> Result<Option<McConfig>, CliError> {
    let Some(raw) = raw else {
        return Ok(None);
    };
    let sizes = match required(raw.n, "mc.N")? {
        OneOrMany::One(n) => vec![n],
        OneOrMany::Many(ns) => ns,
    };
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(invalid(
            "mc.N",
            "block sizes must be positive and at least one is required",
        ));
    }
    let realizations = raw.realizations.unwrap_or(1);
    if realizations == 0 {
        return Err(invalid("mc.realizations", "must be positive"));
    }
    Ok(Some(McConfig {
        sizes,
        realizations,
        seed: raw.seed.unwrap_or(0),
    }))
}

fn parse_error(e: serde_json::Error) -> CliError {
    CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses and validates a JSON problem config, applying defaults.
pub fn parse_config(text: &str) -> Result<ProblemConfig, CliError> {
    let value: Value = serde_json::from_str(text).map_err(parse_error)?;
    if !value.is_object() {
        return Err(invalid("model", "the config must be a JSON object"));
    }
    if value.get("model").is_none() {
        return Err(invalid("model", "is required"));
    }
    // Re-parse the text rather than the value so errors carry positions.
    let mut raw: RawConfig = serde_json::from_str(text).map_err(parse_error)?;
    let model = model_from_raw(&mut raw)?;
    let solver = raw.solver.unwrap_or_default();
    solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
    let snr = match raw.snr {
        Some(list) => {
            if list.is_empty() || list.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(invalid("snr", "must be a nonempty list of positive values"));
            }
            Some(list)
        }
        None => None,
    };
    let config = ProblemConfig {
        model,
        grid: grid_from_raw(raw.grid)?,
        solver,
        snr,
        mc: mc_from_raw(raw.mc)?,
    };
    config.check_model()?;
    Ok(config)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ProblemConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn model_field(model: &ModelConfig) -> &'static str {
    match model {
        ModelConfig::SelfAdjoint { .. } | ModelConfig::Rectangular { .. } => "sigma",
        ModelConfig::HhStar { .. } => "tau",
        ModelConfig::Isi { .. } => "taps",
        ModelConfig::Nonsep { .. } => "psi",
    }
}

impl ProblemConfig {
    fn check_model(&self) -> Result<(), CliError> {
        let field = model_field(&self.model);
        let result = match &self.model {
            ModelConfig::Nonsep { psi, psi_hat } => CorrelationFamily::new(psi.clone(), psi_hat.clone()).map(|_| ()),
            _ => self.covariance().and_then(validate_covariance).map(|_| ()),
        };
        result.map_err(|e| invalid(field, e.to_string()))
    }

    /// The covariance spec, for every model except `nonsep`.
    pub fn covariance(&self) -> crate::Result<CovarianceSpec> {
        match &self.model {
            ModelConfig::SelfAdjoint { d, sigma } => Ok(CovarianceSpec::SelfAdjoint {
                d: *d,
                sigma: sigma.clone(),
            }),
            ModelConfig::HhStar { a, b, tau } => Ok(CovarianceSpec::HhStar {
                a: *a,
                b: *b,
                tau: tau.clone(),
            }),
            ModelConfig::Isi { k, l, taps } => isi_covariance(*k, *l, Some(taps)),
            ModelConfig::Rectangular { alpha, sigma } => Ok(CovarianceSpec::Rectangular {
                alpha: alpha.clone(),
                sigma: sigma.clone(),
            }),
            ModelConfig::Nonsep { .. } => Err(Error::WrongKind {
                expected: "a covariance model",
                found: "nonsep",
            }),
        }
    }

    pub fn family(&self) -> crate::Result<CorrelationFamily> {
        match &self.model {
            ModelConfig::Nonsep { psi, psi_hat } => CorrelationFamily::new(psi.clone(), psi_hat.clone()),
            other => Err(Error::WrongKind {
                expected: "nonsep",
                found: other.name(),
            }),
        }
    }

    /// The scalar law whose density the commands compute: the selfadjoint
    /// matrix itself, or `HH*` for channel models.
    pub fn law(&self) -> crate::Result<Law> {
        match &self.model {
            ModelConfig::Nonsep { .. } => fading_law(&self.family()?),
            _ => Ok(Law::from_covariance(&validate_covariance(self.covariance()?)?)),
        }
    }

    /// The Monte Carlo sampler of the same ensemble.
    pub fn sampler(&self) -> crate::Result<Sampler> {
        match &self.model {
            ModelConfig::Nonsep { .. } => Sampler::fading(&self.family()?),
            _ => Sampler::new(&self.covariance()?),
        }
    }

    pub fn density_options(&self) -> DensityOptions {
        DensityOptions {
            points: self.grid.points,
            range: self.grid.range,
            epsilon: self.grid.epsilon,
        }
    }

    fn to_raw(&self) -> RawConfig {
        let sigma_raw = |sigma: &[SigmaEntry]| {
            sigma
                .iter()
                .map(|e| (e.i + 1, e.j + 1, e.k + 1, e.l + 1, Scalar::from_value(e.value)))
                .collect()
        };
        let matrices_raw = |ms: &[CMat]| {
            ms.iter()
                .map(|m| {
                    (0..m.nrows())
                        .map(|i| (0..m.ncols()).map(|j| Scalar::from_value(m[(i, j)])).collect())
                        .collect()
                })
                .collect()
        };
        let mut raw = RawConfig {
            model: Some(self.model.name().to_string()),
            ..RawConfig::default()
        };
        match &self.model {
            ModelConfig::SelfAdjoint { d, sigma } => {
                raw.d = Some(*d);
                raw.sigma = Some(sigma_raw(sigma));
            }
            ModelConfig::HhStar { a, b, tau } => {
                raw.a = Some(*a);
                raw.b = Some(*b);
                raw.tau = Some(
                    tau.iter()
                        .map(|e| (e.i + 1, e.k + 1, e.j + 1, e.l + 1, e.value))
                        .collect(),
                );
            }
            ModelConfig::Isi { k, l, taps } => {
                raw.k = Some(*k);
                raw.l = Some(*l);
                raw.taps = Some(taps.clone());
            }
            ModelConfig::Rectangular { alpha, sigma } => {
                raw.alpha = Some(alpha.clone());
                raw.sigma = Some(sigma_raw(sigma));
            }
            ModelConfig::Nonsep { psi, psi_hat } => {
                raw.psi = Some(matrices_raw(psi));
                raw.psi_hat = Some(matrices_raw(psi_hat));
            }
        }
        raw.grid = Some(RawGrid {
            xmin: self.grid.range.map(|r| r.0),
            xmax: self.grid.range.map(|r| r.1),
            points: Some(self.grid.points),
            epsilon: self.grid.epsilon,
        });
        raw.solver = Some(self.solver);
        raw.snr = self.snr.clone();
        raw.mc = self.mc.as_ref().map(|mc| RawMc {
            n: Some(OneOrMany::Many(mc.sizes.clone())),
            realizations: Some(mc.realizations),
            seed: Some(mc.seed),
        });
        raw
    }

    /// The config as pretty-printed JSON that parses back to `self`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Density,
    Capacity,
    #[value(name = "mc-compare")]
    McCompare,
    Moments,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Density => "density",
            Command::Capacity => "capacity",
            Command::McCompare => "mc-compare",
            Command::Moments => "moments",
        }
    }
}

/// What a command produced: the summary printed to standard output and the
/// invariant checks that failed.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Value,
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }
}

/// Float format of every CSV cell: 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// A CSV table with a header row.
pub fn csv_table(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|x| format_float(*x)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

struct Emitter<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl Emitter<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.files.push(path);
        Ok(())
    }
}

fn density_diagnostics(report: &DensityReport) -> Value {
    let d = &report.density;
    json!({
        "points": d.xs.len(),
        "xmin": d.xs[0],
        "xmax": d.xs[d.xs.len() - 1],
        "epsilon": d.epsilon_used.1,
        "mass": report.mass,
        "atom_at_zero": d.atom_at_zero,
        "min_before_clipping": d.min_raw,
        "max_positivity": report.max_positivity,
        "max_residual": report.max_residual,
        "solved_points": report.solved_points,
        "warnings": report.warnings,
    })
}

fn density_failures(report: &DensityReport) -> Vec<String> {
    let mut failures = report.warnings.clone();
    if report.max_positivity > POSITIVITY_TOL {
        failures.push(format!(
            "max eigenvalue of Im G is {:.3e}, above {POSITIVITY_TOL:e}",
            report.max_positivity
        ));
    }
    failures
}

fn require_mc(config: &ProblemConfig, command: Command) -> Result<&McConfig, CliError> {
    config
        .mc
        .as_ref()
        .ok_or_else(|| invalid("mc", format!("the {} command needs an mc block", command.name())))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean over realizations of `(1/n) Σ log₂(1 + snr·λ)`.
pub fn mc_capacity(spectra: &[Vec<f64>], snr: f64) -> f64 {
    let per: Vec<f64> = spectra
        .iter()
        .map(|eigs| {
            let bits: Vec<f64> = eigs
                .iter()
                .map(|l| (snr * l.max(0.0)).ln_1p() / std::f64::consts::LN_2)
                .collect();
            mean(&bits)
        })
        .collect();
    mean(&per)
}

/// Runs one command and writes its artifacts into `out`.
pub fn run(command: Command, config: &ProblemConfig, out: &Path) -> Result<RunOutcome, CliError> {
    let law = config.law()?;
    let report = compute_density(&law, &config.density_options(), &config.solver)?;
    let mut failures = density_failures(&report);
    let mut emit = Emitter { out, files: Vec::new() };
    let mut summary = json!({
        "command": command.name(),
        "model": config.model.name(),
        "density": density_diagnostics(&report),
    });
    match command {
        Command::Density => {
            let rows: Vec<Vec<f64>> = report
                .density
                .xs
                .iter()
                .zip(&report.density.ps)
                .map(|(x, p)| vec![*x, *p])
                .collect();
            emit.write("density.csv", &csv_table(&["x".into(), "density".into()], &rows))?;
        }
        Command::Capacity => {
            let snrs = config
                .snr
                .as_ref()
                .ok_or_else(|| invalid("snr", "the capacity command needs an snr list"))?;
            let asymptotic: Vec<f64> = snrs
                .iter()
                .map(|s| capacity(&report.density, *s))
                .collect::<crate::Result<_>>()?;
            let mut header = vec!["snr".to_string(), "bits".to_string()];
            let mut columns = vec![asymptotic.clone()];
            let mut mc_summary = Vec::new();
            if let Some(mc) = &config.mc {
                let sampler = config.sampler()?;
                for n in &mc.sizes {
                    let spectra = sampler.pooled_spectra(*n, mc.seed, mc.realizations)?;
                    let bits: Vec<f64> = snrs.iter().map(|s| mc_capacity(&spectra, *s)).collect();
                    header.push(format!("bits_mc_N{n}"));
                    mc_summary.push(json!({"N": n, "bits": bits}));
                    columns.push(bits);
                }
            }
            let rows: Vec<Vec<f64>> = snrs
                .iter()
                .enumerate()
                .map(|(r, s)| std::iter::once(*s).chain(columns.iter().map(|c| c[r])).collect())
                .collect();
            emit.write("capacity.csv", &csv_table(&header, &rows))?;
            summary["snr"] = json!(snrs);
            summary["bits"] = json!(asymptotic);
            if let Some(mc) = &config.mc {
                summary["mc"] = json!({
                    "realizations": mc.realizations,
                    "seed": mc.seed,
                    "sizes": mc_summary,
                });
            }
        }
        Command::McCompare => {
            let mc = require_mc(config, command)?;
            let sampler = config.sampler()?;
            let f = cdf(&report.density);
            let mut sizes = Vec::new();
            for n in &mc.sizes {
                let spectra = sampler.pooled_spectra(*n, mc.seed, mc.realizations)?;
                let pooled: Vec<f64> = spectra.into_iter().flatten().collect();
                let ks = ks_distance(&pooled, |x| f.eval(x));
                let rows: Vec<Vec<f64>> = pooled.iter().map(|x| vec![*x]).collect();
                emit.write(
                    &format!("eigenvalues_N{n}.csv"),
                    &csv_table(&["eigenvalue".into()], &rows),
                )?;
                let hist = histogram(&pooled)?;
                emit.write(
                    &format!("histogram_N{n}.json"),
                    &json_text(&serde_json::to_value(&hist).expect("histogram serializes")),
                )?;
                sizes.push(json!({"N": n, "eigenvalues": pooled.len(), "ks": ks}));
            }
            summary["mc"] = json!({
                "realizations": mc.realizations,
                "seed": mc.seed,
                "sizes": sizes,
            });
        }
        Command::Moments => {
            let weights = law.weights();
            let orders: Vec<u32> = if law.is_gram() {
                vec![1, 2, 3, 4]
            } else {
                vec![2, 4, 6, 8]
            };
            let mut rows = Vec::new();
            let mut table = Vec::new();
            for k in orders {
                // The Gram moment of order k is the 2k-th moment of the
                // hermitized element on the traced block.
                let m = if law.is_gram() { 2 * k } else { k } as usize;
                let recursion = nc2_trace_moment(law.eta(), &weights, m)?;
                let density = moments_from_density(&report.density, k);
                let rel = (recursion - density).abs() / recursion.abs().max(f64::MIN_POSITIVE);
                if rel > MOMENT_REL_TOL {
                    failures.push(format!(
                        "moment {k}: recursion {recursion:.6e} and density {density:.6e} differ by {rel:.3e} relative"
                    ));
                }
                rows.push(vec![k as f64, recursion, density]);
                table.push(json!({"order": k, "recursion": recursion, "density": density, "relative_error": rel}));
            }
            let header = ["order".to_string(), "recursion".into(), "density".into()];
            let mut text = header.join(",");
            text.push('\n');
            for r in &rows {
                let _ = writeln!(text, "{},{},{}", r[0] as u32, format_float(r[1]), format_float(r[2]));
            }
            emit.write("moments.csv", &text)?;
            summary["moments"] = json!(table);
        }
    }
    summary["failures"] = json!(failures);
    summary["passed"] = json!(failures.is_empty());
    let summary_name = match command {
        Command::Density => "density_summary.json",
        Command::Capacity => "capacity_summary.json",
        Command::McCompare => "mc_summary.json",
        Command::Moments => "moments_summary.json",
    };
    emit.write(summary_name, &json_text(&summary))?;
    Ok(RunOutcome {
        summary,
        files: emit.files,
        failures,
    })
}
