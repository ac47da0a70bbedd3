//! TOML run configuration with line-numbered diagnostics.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vibcorr::correlations::{Detector, PhononBasis};
use vibcorr::{BathParams, Integrator, PropagatorConfig, VibronicParams};

/// The documented default configuration.
pub const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(line: Option<usize>, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Equilibrate,
    G1,
    G2,
    Scan,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Equilibrate => "equilibrate",
            TaskKind::G1 => "g1",
            TaskKind::G2 => "g2",
            TaskKind::Scan => "scan",
        }
    }
}

/// Start of the τ evolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anchor {
    /// First recorded time after the detection traces reach steady state.
    Steady,
    At(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub first: Detector,
    pub second: Detector,
    pub t_end_ps: f64,
    pub tau_end_ps: f64,
    pub t_anchor: Anchor,
    pub t_anchor_closed_ps: f64,
    pub normalize: bool,
    pub phonon_basis: PhononBasis,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemAxis {
    Lambda(Vec<f64>),
    Delta(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanSpec {
    /// Task run in every cell (g1 or g2).
    pub task: TaskKind,
    pub eta: Vec<f64>,
    pub system: SystemAxis,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub svg: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub params: VibronicParams,
    pub bath: BathParams,
    pub propagator: PropagatorConfig,
    pub pre_equilibration_fs: f64,
    pub task: Task,
    pub scan: Option<ScanSpec>,
    pub output: OutputSpec,
}

impl RunConfig {
    /// Key/value provenance for output headers and manifests.
    pub fn provenance(&self) -> Vec<(String, String)> {
        let p = &self.params;
        let b = &self.bath;
        let c = &self.propagator;
        let t = &self.task;
        let integrator = match c.integrator {
            Integrator::Rk4 => "rk4",
            Integrator::LawsonRk4 => "lawson-rk4",
        };
        let anchor = match t.t_anchor {
            Anchor::Steady => "steady".to_string(),
            Anchor::At(x) => x.to_string(),
        };
        let basis = match t.phonon_basis {
            PhononBasis::Diabatic => "diabatic",
            PhononBasis::Adiabatic => "adiabatic",
        };
        [
            ("omega_eg_cm1", p.omega_eg.to_string()),
            ("omega0_cm1", p.omega_0.to_string()),
            ("delta", p.delta.to_string()),
            ("lambda_cm1", p.lambda_reorg().to_string()),
            ("drive_cm1", p.drive_amp.to_string()),
            ("n_levels", p.n_levels.to_string()),
            ("temperature_k", p.temperature.to_string()),
            ("eta_cm1", b.eta.to_string()),
            ("big_lambda_cm1", b.big_lambda.to_string()),
            ("n_matsubara", b.n_matsubara.to_string()),
            ("dt_fs", c.dt.to_string()),
            ("depth", c.depth.to_string()),
            ("record_stride", c.record_stride.to_string()),
            ("scaled_ados", c.use_scaled_ados.to_string()),
            ("integrator", integrator.to_string()),
            ("pre_equilibration_fs", self.pre_equilibration_fs.to_string()),
            ("task", t.kind.name().to_string()),
            ("first", t.first.name().to_string()),
            ("second", t.second.name().to_string()),
            ("t_end_ps", t.t_end_ps.to_string()),
            ("tau_end_ps", t.tau_end_ps.to_string()),
            ("t_anchor_ps", anchor),
            ("t_anchor_closed_ps", t.t_anchor_closed_ps.to_string()),
            ("normalize", t.normalize.to_string()),
            ("phonon_basis", basis.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    bath: RawBath,
    #[serde(default)]
    propagator: RawPropagator,
    task: Option<RawTask>,
    scan: Option<RawScan>,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawModel {
    omega_eg_cm1: f64,
    omega0_cm1: f64,
    delta: Option<f64>,
    lambda_cm1: Option<f64>,
    drive_cm1: f64,
    n_levels: usize,
    temperature_k: f64,
}

impl Default for RawModel {
    fn default() -> Self {
        let p = VibronicParams::default();
        Self {
            omega_eg_cm1: p.omega_eg,
            omega0_cm1: p.omega_0,
            delta: None,
            lambda_cm1: None,
            drive_cm1: p.drive_amp,
            n_levels: p.n_levels,
            temperature_k: p.temperature,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawBath {
    eta_cm1: f64,
    big_lambda_cm1: f64,
    n_matsubara: usize,
}

impl Default for RawBath {
    fn default() -> Self {
        let b = BathParams::default();
        Self { eta_cm1: b.eta, big_lambda_cm1: b.big_lambda, n_matsubara: b.n_matsubara }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPropagator {
    dt_fs: f64,
    depth: usize,
    record_stride: usize,
    scaled_ados: bool,
    integrator: Integrator,
    pre_equilibration_fs: f64,
    ado_cap: usize,
}

impl Default for RawPropagator {
    fn default() -> Self {
        let c = PropagatorConfig::default();
        Self {
            dt_fs: c.dt,
            depth: c.depth,
            record_stride: c.record_stride,
            scaled_ados: c.use_scaled_ados,
            integrator: c.integrator,
            pre_equilibration_fs: 2000.0,
            ado_cap: c.ado_cap,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawAnchor {
    Time(f64),
    Word(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    kind: Option<TaskKind>,
    first: Option<Detector>,
    second: Option<Detector>,
    t_end_ps: Option<f64>,
    tau_end_ps: Option<f64>,
    t_anchor_ps: Option<RawAnchor>,
    t_anchor_closed_ps: Option<f64>,
    normalize: Option<bool>,
    phonon_basis: Option<PhononBasis>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScan {
    task: Option<TaskKind>,
    eta_cm1: Option<Vec<f64>>,
    lambda_cm1: Option<Vec<f64>>,
    delta: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawOutput {
    dir: String,
    svg: bool,
}

impl Default for RawOutput {
    fn default() -> Self {
        Self { dir: "out".into(), svg: true }
    }
}

/// Line of `key` inside `[section]`, or of the section header when `key`
/// is empty.
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.split('#').next().unwrap_or("").trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() && t.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

/// Map a library parameter name to its config key.
fn key_of(name: &str) -> (&'static str, &'static str) {
    match name {
        "omega_eg" => ("model", "omega_eg_cm1"),
        "omega_0" => ("model", "omega0_cm1"),
        "delta" => ("model", "delta"),
        "lambda_reorg" => ("model", "lambda_cm1"),
        "drive_amp" => ("model", "drive_cm1"),
        "n_levels" => ("model", "n_levels"),
        "temperature" => ("model", "temperature_k"),
        "eta" => ("bath", "eta_cm1"),
        "big_lambda" => ("bath", "big_lambda_cm1"),
        "dt" => ("propagator", "dt_fs"),
        "depth" => ("propagator", "depth"),
        "record_stride" => ("propagator", "record_stride"),
        _ => ("", ""),
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(None, format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&src)
}

pub fn parse_config_str(src: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| {
        let line = e.span().map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
        ConfigError::new(line, e.message().trim().to_string())
    })?;
    let at = |section: &str, key: &str, msg: String| ConfigError::new(locate(src, section, key), msg);
    let from_core = |e: vibcorr::Error| match &e {
        vibcorr::Error::InvalidParameter { name, reason } => {
            let (section, key) = key_of(name);
            let shown = if key.is_empty() { *name } else { key };
            at(section, key, format!("{shown}: {reason}"))
        }
        _ => ConfigError::new(None, e.to_string()),
    };

    let m = &raw.model;
    let base = VibronicParams {
        omega_eg: m.omega_eg_cm1,
        omega_0: m.omega0_cm1,
        delta: m.delta.unwrap_or(VibronicParams::default().delta),
        drive_amp: m.drive_cm1,
        n_levels: m.n_levels,
        temperature: m.temperature_k,
    };
    let params = match (m.delta, m.lambda_cm1) {
        (Some(_), Some(lam)) => {
            let derived = base.lambda_reorg();
            if (lam - derived).abs() > 1e-9 * derived.abs().max(1.0) {
                return Err(at(
                    "model",
                    "lambda_cm1",
                    format!("lambda_cm1 = {lam} contradicts delta (omega0_cm1·delta²/2 = {derived}); give one of the two"),
                ));
            }
            base
        }
        (None, Some(lam)) => base.with_lambda(lam).map_err(from_core)?,
        _ => base,
    };
    params.validate().map_err(from_core)?;

    let bath = BathParams {
        eta: raw.bath.eta_cm1,
        big_lambda: raw.bath.big_lambda_cm1,
        temperature: params.temperature,
        n_matsubara: raw.bath.n_matsubara,
    };
    bath.validate().map_err(from_core)?;

    let rp = &raw.propagator;
    let propagator = PropagatorConfig {
        dt: rp.dt_fs,
        depth: rp.depth,
        record_stride: rp.record_stride,
        use_scaled_ados: rp.scaled_ados,
        integrator: rp.integrator,
        ado_cap: rp.ado_cap,
    };
    propagator.validate().map_err(from_core)?;
    if !(rp.pre_equilibration_fs >= 0.0) || !rp.pre_equilibration_fs.is_finite() {
        return Err(at("propagator", "pre_equilibration_fs", "pre_equilibration_fs must be finite and >= 0".into()));
    }
    let multiple = |span_fs: f64, unit: f64| {
        let n = span_fs / unit;
        (n - n.round()).abs() < 1e-6
    };
    if !multiple(rp.pre_equilibration_fs, rp.dt_fs) {
        return Err(at("propagator", "pre_equilibration_fs", "pre_equilibration_fs must be a multiple of dt_fs".into()));
    }

    let task_line = locate(src, "task", "");
    let rt = raw.task.ok_or_else(|| ConfigError::new(None, "task required: add a [task] block with kind = ..."))?;
    let kind = rt.kind.ok_or_else(|| ConfigError::new(task_line, "task required: [task] has no kind"))?;
    let positive = |key: &str, v: f64| -> Result<f64, ConfigError> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(at("task", key, format!("{key} must be finite and > 0, got {v}")))
        }
    };
    let record_ps = rp.dt_fs * rp.record_stride as f64 / 1000.0;
    let on_grid = |key: &str, v: f64| -> Result<f64, ConfigError> {
        if multiple(v, record_ps) {
            Ok(v)
        } else {
            Err(at("task", key, format!("{key} = {v} is not a multiple of the record interval {record_ps} ps")))
        }
    };
    let t_end_ps = on_grid("t_end_ps", positive("t_end_ps", rt.t_end_ps.unwrap_or(10.0))?)?;
    let tau_end_ps = on_grid("tau_end_ps", positive("tau_end_ps", rt.tau_end_ps.unwrap_or(4.0))?)?;
    let t_anchor_closed_ps = on_grid("t_anchor_closed_ps", positive("t_anchor_closed_ps", rt.t_anchor_closed_ps.unwrap_or(3.5))?)?;
    let t_anchor = match rt.t_anchor_ps {
        None => Anchor::Steady,
        Some(RawAnchor::Word(w)) if w == "steady" => Anchor::Steady,
        Some(RawAnchor::Word(w)) => {
            return Err(at("task", "t_anchor_ps", format!("t_anchor_ps must be \"steady\" or a time in ps, got {w:?}")))
        }
        Some(RawAnchor::Time(t)) => {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(at("task", "t_anchor_ps", format!("t_anchor_ps must be finite and >= 0, got {t}")));
            }
            Anchor::At(on_grid("t_anchor_ps", t)?)
        }
    };
    let task = Task {
        kind,
        first: rt.first.unwrap_or(Detector::Photon),
        second: rt.second.unwrap_or(Detector::Photon),
        t_end_ps,
        tau_end_ps,
        t_anchor,
        t_anchor_closed_ps,
        normalize: rt.normalize.unwrap_or(true),
        phonon_basis: rt.phonon_basis.unwrap_or_default(),
    };

    let scan = match raw.scan {
        None if kind == TaskKind::Scan => return Err(ConfigError::new(task_line, "task kind \"scan\" needs a [scan] block")),
        None => None,
        Some(rs) => {
            let scan_at = |key: &str, msg: String| at("scan", key, msg);
            let cell_task = rs.task.unwrap_or(TaskKind::G2);
            if !matches!(cell_task, TaskKind::G1 | TaskKind::G2) {
                return Err(scan_at("task", "scan cells run g1 or g2".into()));
            }
            let eta = rs.eta_cm1.unwrap_or_else(|| vec![bath.eta]);
            if eta.is_empty() || eta.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
                return Err(scan_at("eta_cm1", "eta_cm1 must be a non-empty list of finite values >= 0".into()));
            }
            let system = match (rs.lambda_cm1, rs.delta) {
                (Some(_), Some(_)) => return Err(scan_at("delta", "give lambda_cm1 or delta, not both".into())),
                (Some(l), None) => SystemAxis::Lambda(l),
                (None, Some(d)) => SystemAxis::Delta(d),
                (None, None) => SystemAxis::Delta(vec![params.delta]),
            };
            let (key, values) = match &system {
                SystemAxis::Lambda(v) => ("lambda_cm1", v),
                SystemAxis::Delta(v) => ("delta", v),
            };
            if values.is_empty() || values.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(scan_at(key, format!("{key} must be a non-empty list of finite values >= 0")));
            }
            Some(ScanSpec { task: cell_task, eta, system })
        }
    };

    Ok(RunConfig {
        params,
        bath,
        propagator,
        pre_equilibration_fs: rp.pre_equilibration_fs,
        task,
        scan,
        output: OutputSpec { dir: PathBuf::from(&raw.output.dir), svg: raw.output.svg },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_finds_keys_and_headers() {
        let src = "[model]\nn_levels = 3 # c\n\n[task]\nkind = \"g2\"\n";
        assert_eq!(locate(src, "model", "n_levels"), Some(2));
        assert_eq!(locate(src, "task", ""), Some(4));
        assert_eq!(locate(src, "task", "kind"), Some(5));
        assert_eq!(locate(src, "bath", "eta_cm1"), None);
    }
}
