//! Detection probabilities and two-time correlation functions via the
//! quantum regression protocol.
//!
//! For a first detection by `c₁` at time `t` and a second by `c₂` at
//! `t + τ`, the unnormalized correlation is
//! `G(t, τ) = Tr[c₂†c₂ e^{Lτ}(c₁ ρ(t) c₁†)]`, where the hierarchy (all ADOs,
//! not only ρ) is seeded with `c₁ · c₁†` and propagated with the drive phase
//! continuing from `t`.

use std::fmt;

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bath::BathParams;
use crate::error::{invalid, Error, Result};
use crate::heom::{AdoHierarchy, Propagator, PropagatorConfig};
use crate::linalg;
use crate::model::{adiabatize, build_system, thermal_state, BasisTransform, DensityMatrix, DriveField, OperatorSet, VibronicParams};
use crate::units::{period_fs, FS_PER_PS, SPEED_OF_LIGHT_CM_PER_FS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Photon,
    Phonon,
}

impl Detector {
    pub const ALL: [Detector; 2] = [Detector::Photon, Detector::Phonon];

    pub fn name(self) -> &'static str {
        match self {
            Detector::Photon => "photon",
            Detector::Phonon => "phonon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "photon" | "a" => Some(Detector::Photon),
            "phonon" | "b" => Some(Detector::Phonon),
            _ => None,
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Basis in which vibrational quanta are counted by the phonon detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhononBasis {
    /// `1 ⊗ b` on the diabatic product basis.
    #[default]
    Diabatic,
    /// `U (1 ⊗ b) Uᵀ`: lowers the quanta of the adiabatic eigenstates.
    Adiabatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    T,
    Tau,
}

impl Axis {
    pub fn column(self) -> &'static str {
        match self {
            Axis::T => "t_ps",
            Axis::Tau => "tau_ps",
        }
    }
}

/// A sampled function of `t` or `τ` (ps) with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTrace {
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub op_first: Option<Detector>,
    pub op_second: Option<Detector>,
    pub normalized: bool,
    /// Denominator applied when `normalized`.
    pub reference_value: Option<f64>,
    /// Start of the τ evolution, ps.
    pub t_anchor: Option<f64>,
}

impl CorrelationTrace {
    pub fn new(axis: Axis, grid: Vec<f64>, values: Vec<f64>) -> Self {
        Self { axis, grid, values, op_first: None, op_second: None, normalized: false, reference_value: None, t_anchor: None }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.values.len() {
            return Err(Error::DimensionMismatch { expected: self.grid.len(), found: self.values.len() });
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("grid", "must be strictly increasing"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("values", "must be finite"));
        }
        if self.normalized && !matches!(self.reference_value, Some(r) if r > 0.0) {
            return Err(invalid("reference_value", "normalized traces need a positive reference"));
        }
        Ok(())
    }

    /// Samples with grid inside `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> CorrelationTrace {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.grid[i] >= lo && self.grid[i] <= hi).collect();
        CorrelationTrace {
            grid: keep.iter().map(|&i| self.grid[i]).collect(),
            values: keep.iter().map(|&i| self.values[i]).collect(),
            ..self.clone()
        }
    }

    /// Divide by `reference` and mark as normalized.
    pub fn normalized_by(&self, reference: f64) -> Result<CorrelationTrace> {
        if !(reference.abs() >= NORMALIZABLE) {
            return Err(Error::InvalidParameter {
                name: "reference_value",
                reason: format!("denominator {reference:e} below {NORMALIZABLE:e}; trace is not normalizable"),
            });
        }
        Ok(CorrelationTrace {
            values: self.values.iter().map(|v| v / reference).collect(),
            normalized: true,
            reference_value: Some(reference),
            ..self.clone()
        })
    }

    /// Largest `|v − v₀| / |v₀|` over the trace.
    pub fn max_relative_deviation(&self) -> f64 {
        let v0 = self.values[0];
        self.values.iter().map(|v| (v - v0).abs()).fold(0.0, f64::max) / v0.abs()
    }
}

/// Smallest denominator accepted when normalizing.
pub const NORMALIZABLE: f64 = 1e-14;

/// Detection operators on the diabatic basis.
#[derive(Clone, Debug)]
pub struct Detectors {
    pub photon: Array2<f64>,
    pub phonon: Array2<f64>,
    photon_number: Array2<f64>,
    phonon_number: Array2<f64>,
}

impl Detectors {
    pub fn new(ops: &OperatorSet, transform: &BasisTransform, basis: PhononBasis) -> Self {
        let phonon = match basis {
            PhononBasis::Diabatic => ops.b_sys.clone(),
            PhononBasis::Adiabatic => transform.u_ad.dot(&ops.b_sys).dot(&transform.u_ad.t()),
        };
        let photon = ops.a_op.clone();
        Self {
            photon_number: photon.t().dot(&photon),
            phonon_number: phonon.t().dot(&phonon),
            photon,
            phonon,
        }
    }

    pub fn operator(&self, d: Detector) -> &Array2<f64> {
        match d {
            Detector::Photon => &self.photon,
            Detector::Phonon => &self.phonon,
        }
    }

    /// `c†c` for the detector.
    pub fn number(&self, d: Detector) -> &Array2<f64> {
        match d {
            Detector::Photon => &self.photon_number,
            Detector::Phonon => &self.phonon_number,
        }
    }

    /// `Tr(c ρ c†)`.
    pub fn probability(&self, d: Detector, rho: &Array2<C64>) -> f64 {
        linalg::trace_product(self.number(d), rho).re
    }

    /// `Tr(c₂†c₂ c₁ ρ c₁†)`: both detections at the same instant.
    pub fn coincidence(&self, first: Detector, second: Detector, rho: &Array2<C64>) -> f64 {
        let seeded = linalg::sandwich(self.operator(first), rho);
        linalg::trace_product(self.number(second), &seeded).re
    }
}

/// `Tr(c ρ c†)` for a real detection operator.
pub fn detection_probability(op: &Array2<f64>, rho: &DensityMatrix) -> Result<f64> {
    if op.nrows() != rho.dim() {
        return Err(Error::DimensionMismatch { expected: rho.dim(), found: op.nrows() });
    }
    Ok(linalg::trace_product(&op.t().dot(op), &rho.elements).re)
}

/// τ = 0 initial condition of the regression: every ADO sandwiched by `c`.
pub fn seed(state: &AdoHierarchy, op: &Array2<f64>) -> AdoHierarchy {
    state.sandwich(op)
}

/// Everything needed to run detection and regression protocols for one
/// parameter set.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub params: VibronicParams,
    pub bath: BathParams,
    pub config: PropagatorConfig,
    /// Undriven evolution before t = 0 that correlates system and bath, fs.
    pub pre_equilibration_fs: f64,
    ops: OperatorSet,
    transform: BasisTransform,
    detectors: Detectors,
}

impl Simulator {
    pub fn new(params: VibronicParams, bath: BathParams, config: PropagatorConfig) -> Result<Self> {
        Self::with_phonon_basis(params, bath, config, PhononBasis::Diabatic)
    }

    pub fn with_phonon_basis(
        params: VibronicParams,
        bath: BathParams,
        config: PropagatorConfig,
        basis: PhononBasis,
    ) -> Result<Self> {
        params.validate()?;
        bath.validate()?;
        config.validate()?;
        if params.temperature != bath.temperature {
            return Err(invalid(
                "temperature",
                format!("model ({} K) and bath ({} K) temperatures differ", params.temperature, bath.temperature),
            ));
        }
        let ops = build_system(&params)?;
        let transform = adiabatize(&ops.h_s)?;
        let detectors = Detectors::new(&ops, &transform, basis);
        Ok(Self { params, bath, config, pre_equilibration_fs: 2000.0, ops, transform, detectors })
    }

    pub fn with_pre_equilibration(mut self, duration_fs: f64) -> Self {
        self.pre_equilibration_fs = duration_fs;
        self
    }

    pub fn operators(&self) -> &OperatorSet {
        &self.ops
    }

    pub fn transform(&self) -> &BasisTransform {
        &self.transform
    }

    pub fn detectors(&self) -> &Detectors {
        &self.detectors
    }

    pub fn propagator(&self) -> Result<Propagator> {
        Propagator::new(&self.ops, &self.bath, DriveField::from_params(&self.params), &self.config)
    }

    pub fn thermal_state(&self) -> Result<DensityMatrix> {
        thermal_state(&self.params, &self.transform)
    }

    /// Thermal state, pre-equilibrated with the drive off, at t = 0.
    ///
    /// Without bath coupling the thermal state commutes with H_S and the
    /// pre-equilibration is skipped.
    pub fn initial_state(&self, prop: &mut Propagator) -> Result<AdoHierarchy> {
        let rho = self.thermal_state()?;
        if self.bath.eta == 0.0 || self.pre_equilibration_fs == 0.0 {
            return prop.initial_state(&rho, 0.0);
        }
        prop.equilibrate(&rho, self.pre_equilibration_fs)
    }

    /// Driven evolution from t = 0 to `t_end_ps`, recording detection
    /// probabilities and τ = 0 coincidences every `record_stride` steps.
    ///
    /// Hierarchy snapshots are kept at `snapshot_ps` (each must lie on the
    /// record grid).
    pub fn time_run(&self, t_end_ps: f64, snapshot_ps: &[f64]) -> Result<TimeRun> {
        let mut prop = self.propagator()?;
        let mut state = self.initial_state(&mut prop)?;
        let mut run = TimeRun::default();
        let mut pending: Vec<f64> = snapshot_ps.iter().map(|t| t * FS_PER_PS).collect();
        let tol = 1e-6 * self.config.dt;
        let det = &self.detectors;
        prop.propagate_with(&mut state, t_end_ps * FS_PER_PS, |t, s| {
            let rho = s.ado(0);
            let rho = rho.to_owned();
            run.t_ps.push(t / FS_PER_PS);
            run.photon.push(det.probability(Detector::Photon, &rho));
            run.phonon.push(det.probability(Detector::Phonon, &rho));
            for (i, first) in Detector::ALL.iter().enumerate() {
                for (j, second) in Detector::ALL.iter().enumerate() {
                    run.coincidence[2 * i + j].push(det.coincidence(*first, *second, &rho));
                }
            }
            let tr = linalg::trace(&rho);
            run.max_trace_error = run.max_trace_error.max((tr - C64::new(1.0, 0.0)).norm());
            run.max_hermiticity_error = run.max_hermiticity_error.max(linalg::hermiticity_deviation(&rho));
            pending.retain(|&ts| {
                if (ts - t).abs() <= tol {
                    run.snapshots.push(s.clone());
                    false
                } else {
                    true
                }
            });
        })?;
        if let Some(t) = pending.first() {
            return Err(invalid("snapshot_ps", format!("{} ps is not on the record grid of this run", t / FS_PER_PS)));
        }
        Ok(run)
    }

    /// Seed `anchor` with the first detector and propagate for `tau_end_ps`,
    /// recording `Tr[c₂†c₂ ρ̃(τ)]` for both second detectors.
    pub fn regress(&self, anchor: &AdoHierarchy, first: Detector, tau_end_ps: f64) -> Result<RegressionRun> {
        let mut prop = self.propagator()?;
        let mut state = seed(anchor, self.detectors.operator(first));
        let t0 = anchor.time;
        let det = &self.detectors;
        let mut run = RegressionRun { first: Some(first), t_anchor_ps: t0 / FS_PER_PS, ..RegressionRun::default() };
        prop.propagate_with(&mut state, t0 + tau_end_ps * FS_PER_PS, |t, s| {
            let rho = s.ado(0).to_owned();
            run.tau_ps.push((t - t0) / FS_PER_PS);
            run.photon.push(det.probability(Detector::Photon, &rho));
            run.phonon.push(det.probability(Detector::Phonon, &rho));
            run.trace.push(linalg::trace(&rho).re);
        })?;
        // τ grid from exact step counts, free of the anchor's rounding
        let step_ps = self.config.dt * self.config.record_stride as f64 / FS_PER_PS;
        for (i, tau) in run.tau_ps.iter_mut().enumerate() {
            *tau = i as f64 * step_ps;
        }
        Ok(run)
    }
}

/// Output of [`Simulator::time_run`].
#[derive(Clone, Debug, Default)]
pub struct TimeRun {
    pub t_ps: Vec<f64>,
    pub photon: Vec<f64>,
    pub phonon: Vec<f64>,
    /// Unnormalized `G(t, 0)` for (first, second) in order
    /// (photon, photon), (photon, phonon), (phonon, photon), (phonon, phonon).
    pub coincidence: [Vec<f64>; 4],
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub snapshots: Vec<AdoHierarchy>,
}

impl TimeRun {
    /// Detection probability `D_c(t)` as a trace.
    pub fn detection(&self, d: Detector) -> CorrelationTrace {
        let values = match d {
            Detector::Photon => self.photon.clone(),
            Detector::Phonon => self.phonon.clone(),
        };
        CorrelationTrace { op_first: Some(d), ..CorrelationTrace::new(Axis::T, self.t_ps.clone(), values) }
    }

    /// Unnormalized `G(t, τ=0)` over the run.
    pub fn coincidence(&self, first: Detector, second: Detector) -> CorrelationTrace {
        let k = 2 * (first as usize) + second as usize;
        CorrelationTrace {
            op_first: Some(first),
            op_second: Some(second),
            ..CorrelationTrace::new(Axis::T, self.t_ps.clone(), self.coincidence[k].clone())
        }
    }

    pub fn snapshot_at(&self, t_ps: f64) -> Option<&AdoHierarchy> {
        self.snapshots.iter().find(|s| (s.time / FS_PER_PS - t_ps).abs() < 1e-9)
    }
}

/// Output of [`Simulator::regress`] for one seeding detector.
#[derive(Clone, Debug, Default)]
pub struct RegressionRun {
    pub first: Option<Detector>,
    pub t_anchor_ps: f64,
    pub tau_ps: Vec<f64>,
    /// `Tr[a†a ρ̃(τ)]`
    pub photon: Vec<f64>,
    /// `Tr[b†b ρ̃(τ)]`
    pub phonon: Vec<f64>,
    /// `Tr ρ̃(τ)`, constant for a trace-preserving generator.
    pub trace: Vec<f64>,
}

impl RegressionRun {
    /// Unnormalized `G(t_anchor, τ)` with `second` detected at `t + τ`.
    pub fn unnormalized(&self, second: Detector) -> CorrelationTrace {
        let values = match second {
            Detector::Photon => self.photon.clone(),
            Detector::Phonon => self.phonon.clone(),
        };
        CorrelationTrace {
            op_first: self.first,
            op_second: Some(second),
            t_anchor: Some(self.t_anchor_ps),
            ..CorrelationTrace::new(Axis::Tau, self.tau_ps.clone(), values)
        }
    }

    /// `g(τ) = G(τ) / (ref₁ · ref₂)`.
    ///
    /// A denominator below [`NORMALIZABLE`] returns the unnormalized trace,
    /// with `normalized` left false.
    pub fn g2(&self, second: Detector, reference_first: f64, reference_second: f64) -> CorrelationTrace {
        let raw = self.unnormalized(second);
        raw.normalized_by(reference_first * reference_second).unwrap_or(raw)
    }
}

/// Full regression protocol: pre-equilibrate, propagate to `t_anchor_ps`,
/// seed with `first`, evolve for `tau_end_ps` and read out `second`.
///
/// With `references = Some((r₁, r₂))` the result is normalized by `r₁ r₂`.
pub fn g2(
    sim: &Simulator,
    first: Detector,
    second: Detector,
    t_anchor_ps: f64,
    tau_end_ps: f64,
    references: Option<(f64, f64)>,
) -> Result<CorrelationTrace> {
    let run = sim.time_run(t_anchor_ps, &[t_anchor_ps])?;
    let anchor = run.snapshot_at(t_anchor_ps).ok_or_else(|| invalid("t_anchor", "anchor not recorded"))?;
    let reg = sim.regress(anchor, first, tau_end_ps)?;
    Ok(match references {
        Some((r1, r2)) => reg.g2(second, r1, r2),
        None => reg.unnormalized(second),
    })
}

/// Detection probability `D_c(t) = Tr(c ρ(t) c†)` from t = 0 to `t_end_ps`;
/// normalized by `reference` when given.
pub fn g1(sim: &Simulator, op: Detector, t_end_ps: f64, reference: Option<f64>) -> Result<CorrelationTrace> {
    let trace = sim.time_run(t_end_ps, &[])?.detection(op);
    match reference {
        Some(r) => trace.normalized_by(r),
        None => Ok(trace),
    }
}

/// Parameters of the steady-state detector and the normalization rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRule {
    /// Sliding-window length, ps.
    pub window_ps: f64,
    /// Steady when peak-to-peak < `rel_tol` × window mean.
    pub rel_tol: f64,
    /// Averaging span after the steady-state time (one vibrational period), ps.
    pub average_ps: f64,
    /// Closed system: earliest time searched for the half-range crossing, ps.
    pub search_start_ps: f64,
}

impl ReferenceRule {
    pub fn for_model(params: &VibronicParams) -> Self {
        Self { window_ps: 1.0, rel_tol: 0.05, average_ps: period_fs(params.omega_0) / FS_PER_PS, search_start_ps: 3.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub t_ref_ps: f64,
    pub value: f64,
}

/// Earliest `t` after which every full window `[t', t' + window]` is
/// steady.
pub fn steady_state_time(trace: &CorrelationTrace, rule: &ReferenceRule) -> Result<f64> {
    trace.validate()?;
    let t_end = *trace.grid.last().ok_or_else(|| invalid("trace", "empty"))?;
    let g = &trace.grid;
    let v = &trace.values;
    let eps = 1e-9;
    let mut t_ss = None;
    let mut hi = 0;
    for lo in 0..g.len() {
        if g[lo] + rule.window_ps > t_end + eps {
            break;
        }
        while hi + 1 < g.len() && g[hi + 1] <= g[lo] + rule.window_ps + eps {
            hi += 1;
        }
        let w = &v[lo..=hi];
        let (mn, mx) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let steady = mx - mn < rule.rel_tol * mean.abs();
        match (steady, t_ss) {
            (true, None) => t_ss = Some(g[lo]),
            (false, Some(_)) => t_ss = None,
            _ => {}
        }
    }
    t_ss.ok_or(Error::SteadyStateNotReached { t_end_ps: t_end })
}

/// Relative range below which a trace counts as constant (round-off only).
pub const FLAT_TRACE: f64 = 1e-12;

/// Denominator for normalizing a correlation built on `trace` (a detection
/// probability `D_c(t)`).
///
/// With bath coupling: the mean over `average_ps` after the steady-state
/// time. Without: the first time at or after `search_start_ps` where the
/// trace crosses the midpoint of its range, value interpolated linearly.
/// A trace constant to [`FLAT_TRACE`] relative yields its first sample.
pub fn normalization_reference(trace: &CorrelationTrace, eta: f64, rule: &ReferenceRule) -> Result<Reference> {
    trace.validate()?;
    if trace.is_empty() {
        return Err(invalid("trace", "empty"));
    }
    let g = &trace.grid;
    let v = &trace.values;
    let (mn, mx) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if mx - mn <= FLAT_TRACE * mx.abs().max(mn.abs()) {
        return Ok(Reference { t_ref_ps: g[0], value: v[0] });
    }
    if eta > 0.0 {
        let t_ss = steady_state_time(trace, rule)?;
        let sel: Vec<f64> = (0..g.len()).filter(|&i| g[i] >= t_ss && g[i] <= t_ss + rule.average_ps).map(|i| v[i]).collect();
        let value = sel.iter().sum::<f64>() / sel.len() as f64;
        return Ok(Reference { t_ref_ps: t_ss, value });
    }
    let mid = 0.5 * (mn + mx);
    for i in 0..g.len() - 1 {
        if g[i] < rule.search_start_ps {
            continue;
        }
        let (a, b) = (v[i] - mid, v[i + 1] - mid);
        if a == 0.0 {
            return Ok(Reference { t_ref_ps: g[i], value: v[i] });
        }
        if a * b < 0.0 {
            let f = a / (a - b);
            return Ok(Reference { t_ref_ps: g[i] + f * (g[i + 1] - g[i]), value: v[i] + f * (v[i + 1] - v[i]) });
        }
    }
    Err(Error::SteadyStateNotReached { t_end_ps: *g.last().unwrap() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bunching {
    Bunched,
    Antibunched,
    Flat,
}

/// Tolerance band of [`classify_bunching`].
pub const BUNCHING_BAND: f64 = 1e-6;

/// Compare `g(0)` with every `g(τ)`, `0 < τ < period_ps`.
pub fn classify_bunching(trace: &CorrelationTrace, period_ps: f64) -> Result<Bunching> {
    trace.validate()?;
    if trace.grid.first() != Some(&0.0) {
        return Err(invalid("trace", "needs a τ = 0 sample"));
    }
    let g0 = trace.values[0];
    let later: Vec<f64> = (1..trace.len()).filter(|&i| trace.grid[i] < period_ps).map(|i| trace.values[i]).collect();
    if later.is_empty() {
        return Err(invalid("trace", "no samples inside the first period"));
    }
    if later.iter().all(|&g| g0 < g - BUNCHING_BAND) {
        Ok(Bunching::Antibunched)
    } else if later.iter().all(|&g| g0 > g + BUNCHING_BAND) {
        Ok(Bunching::Bunched)
    } else {
        Ok(Bunching::Flat)
    }
}

/// Power spectrum of a uniformly sampled trace.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Bin frequencies, cm⁻¹.
    pub freq_cm: Vec<f64>,
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn bin_width_cm(&self) -> f64 {
        self.freq_cm[1] - self.freq_cm[0]
    }

    /// Frequency of the strongest local maximum within `target ± half_band`.
    pub fn peak_near(&self, target_cm: f64, half_band_cm: f64) -> Option<f64> {
        let p = &self.power;
        (1..p.len() - 1)
            .filter(|&k| (self.freq_cm[k] - target_cm).abs() <= half_band_cm)
            .filter(|&k| p[k] >= p[k - 1] && p[k] >= p[k + 1])
            .max_by(|&a, &b| p[a].total_cmp(&p[b]))
            .map(|k| self.freq_cm[k])
    }
}

/// Hann-windowed, mean-removed DFT power of a trace on a uniform ps grid.
pub fn spectrum(trace: &CorrelationTrace) -> Result<Spectrum> {
    trace.validate()?;
    let n = trace.len();
    if n < 4 {
        return Err(invalid("trace", "too short for a spectrum"));
    }
    let dt_ps = (trace.grid[n - 1] - trace.grid[0]) / (n - 1) as f64;
    if trace.grid.windows(2).any(|w| ((w[1] - w[0]) - dt_ps).abs() > 1e-6 * dt_ps) {
        return Err(invalid("trace", "grid is not uniform"));
    }
    let mean = trace.values.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<C64> = trace
        .values
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let w = 0.5 * (1.0 - (std::f64::consts::TAU * j as f64 / (n - 1) as f64).cos());
            C64::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let dt_fs = dt_ps * FS_PER_PS;
    let df_cm = 1.0 / (n as f64 * dt_fs * SPEED_OF_LIGHT_CM_PER_FS);
    let half = n / 2 + 1;
    Ok(Spectrum {
        freq_cm: (0..half).map(|k| k as f64 * df_cm).collect(),
        power: buf[..half].iter().map(|z| z.norm_sqr()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Basis;
    use approx::assert_relative_eq;

    fn closed(delta: f64, n_levels: usize) -> Simulator {
        let params = VibronicParams { delta, n_levels, ..VibronicParams::default() };
        let bath = BathParams { eta: 0.0, ..BathParams::default() };
        Simulator::new(params, bath, PropagatorConfig::default()).unwrap()
    }

    #[test]
    fn detection_of_simple_states() {
        let sim = closed(1.2, 6);
        let d = &sim.detectors;
        let ground = DensityMatrix::basis_state(12, 0, Basis::Diabatic);
        assert_eq!(detection_probability(&d.photon, &ground).unwrap(), 0.0);
        let excited0 = DensityMatrix::basis_state(12, 6, Basis::Diabatic);
        assert_eq!(detection_probability(&d.phonon, &excited0).unwrap(), 0.0);
        assert_eq!(detection_probability(&d.photon, &excited0).unwrap(), 1.0);
        let excited3 = DensityMatrix::basis_state(12, 9, Basis::Diabatic);
        assert_relative_eq!(detection_probability(&d.phonon, &excited3).unwrap(), 3.0, max_relative = 1e-14);
    }

    #[test]
    fn thermal_phonon_occupation() {
        // Σ_n n P_n with P_n ∝ exp(−500 n / 207.12), direct Boltzmann sum
        let sim = Simulator::new(VibronicParams::default(), BathParams::default(), PropagatorConfig::default()).unwrap();
        let rho = sim.thermal_state().unwrap();
        let got = detection_probability(&sim.detectors.phonon, &rho).unwrap();
        let kt = 0.695_034_800_486_127_4 * 298.0;
        let w: Vec<f64> = (0..10).map(|n| (-500.0 * n as f64 / kt).exp()).collect();
        let z: f64 = w.iter().sum();
        let want: f64 = w.iter().enumerate().map(|(n, p)| n as f64 * p / z).sum();
        assert!((got - 0.0983).abs() < 1e-3, "{got}");
        assert_relative_eq!(got, want, max_relative = 1e-10);
    }

    #[test]
    fn photon_detection_is_excited_population() {
        let sim = closed(1.2, 5);
        let mut m = Array2::zeros((10, 10));
        for i in 0..10 {
            m[[i, i]] = C64::new(0.1 * (i as f64 + 1.0) / 5.5, 0.0);
        }
        m[[1, 7]] = C64::new(0.01, 0.02);
        m[[7, 1]] = C64::new(0.01, -0.02);
        let rho = DensityMatrix::new(m, Basis::Diabatic);
        assert_eq!(detection_probability(&sim.detectors.photon, &rho).unwrap(), rho.excited_population());
    }

    #[test]
    fn seeding_rules() {
        let sim = closed(1.2, 4);
        let prop = sim.propagator().unwrap();
        let rho = DensityMatrix::new(
            Array2::from_shape_fn((8, 8), |(i, j)| if i == j { C64::new(0.125, 0.0) } else { C64::new(0.0, 0.0) }),
            Basis::Diabatic,
        );
        let state = prop.initial_state(&rho, 0.0).unwrap();
        let a = &sim.detectors.photon;
        assert_eq!(seed(&seed(&state, a), a).max_norm(), 0.0);
        let seeded = seed(&state, &sim.detectors.phonon);
        assert_relative_eq!(
            seeded.physical().trace().re,
            detection_probability(&sim.detectors.phonon, &rho).unwrap(),
            max_relative = 1e-14
        );
        // phonon seed on a state confined to n = 0
        let n0 = DensityMatrix::basis_state(8, 4, Basis::Diabatic);
        let s0 = prop.initial_state(&n0, 0.0).unwrap();
        assert_eq!(seed(&s0, &sim.detectors.phonon).max_norm(), 0.0);
    }

    #[test]
    fn photon_pair_vanishes_and_cross_terms_agree_at_zero_delay() {
        let sim = closed(1.2, 4);
        let run = sim.time_run(0.3, &[]).unwrap();
        let aa = run.coincidence(Detector::Photon, Detector::Photon);
        assert!(aa.values.iter().all(|v| v.abs() <= 1e-12));
        let ab = run.coincidence(Detector::Photon, Detector::Phonon);
        let ba = run.coincidence(Detector::Phonon, Detector::Photon);
        for (x, y) in ab.values.iter().zip(&ba.values) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300) + 1e-18);
        }
        assert!(ab.values.iter().any(|v| *v > 1e-6));
    }

    #[test]
    fn regression_preserves_seeded_trace() {
        let sim = closed(1.2, 4);
        let run = sim.time_run(0.2, &[0.2]).unwrap();
        let reg = sim.regress(run.snapshot_at(0.2).unwrap(), Detector::Phonon, 0.3).unwrap();
        let t0 = reg.trace[0];
        assert!(reg.trace.iter().all(|t| (t - t0).abs() < 1e-8 * 0.3 * t0.abs()));
        assert_eq!(reg.tau_ps[0], 0.0);
        assert_relative_eq!(reg.tau_ps[300], 0.3, max_relative = 1e-14);
        assert_eq!(reg.photon[0], run.coincidence[2].last().copied().unwrap());
    }

    #[test]
    fn rejects_mismatched_temperatures_and_off_grid_snapshots() {
        let bath = BathParams { temperature: 300.0, ..BathParams::default() };
        assert!(Simulator::new(VibronicParams::default(), bath, PropagatorConfig::default()).is_err());
        assert!(closed(0.0, 2).time_run(0.01, &[0.0005]).is_err());
    }

    fn sine_trace(t_end: f64, f: impl Fn(f64) -> f64) -> CorrelationTrace {
        let grid: Vec<f64> = (0..=(t_end * 1000.0) as usize).map(|i| i as f64 / 1000.0).collect();
        let values = grid.iter().map(|&t| f(t)).collect();
        CorrelationTrace::new(Axis::T, grid, values)
    }

    #[test]
    fn closed_system_reference_is_half_range_crossing() {
        // sin²(π t / 1 ps): peak at 3.5 ps, midpoint crossing at 3.75 ps
        let tr = sine_trace(6.0, |t| (std::f64::consts::PI * t).sin().powi(2));
        let rule = ReferenceRule::for_model(&VibronicParams::default());
        let r = normalization_reference(&tr, 0.0, &rule).unwrap();
        assert!(r.t_ref_ps > 3.5 && r.t_ref_ps < 4.0);
        assert_relative_eq!(r.t_ref_ps, 3.75, epsilon = 1e-6);
        assert_relative_eq!(r.value, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn constant_trace_reference() {
        let tr = sine_trace(2.0, |_| 0.37);
        let rule = ReferenceRule::for_model(&VibronicParams::default());
        for eta in [0.0, 5.0] {
            let r = normalization_reference(&tr, eta, &rule).unwrap();
            assert_eq!(r, Reference { t_ref_ps: 0.0, value: 0.37 });
        }
        // round-off wiggle still counts as constant
        let noisy = sine_trace(2.0, |t| 0.37 + 1e-16 * (t * 40.0).sin());
        assert_eq!(normalization_reference(&noisy, 0.0, &rule).unwrap().t_ref_ps, 0.0);
    }

    #[test]
    fn steady_state_of_damped_oscillation() {
        // 0.5 + 0.4 e^{−t} cos(2π t), tolerance 0.025. A 1 ps window starting
        // at t has peak-to-peak between 0.8 e^{−t−1} and 0.8 e^{−t}, so
        // ln 32 − 1 < t_ss ≤ ln 32.
        let tr = sine_trace(10.0, |t| 0.5 + 0.4 * (-t).exp() * (std::f64::consts::TAU * t).cos());
        let rule = ReferenceRule::for_model(&VibronicParams::default());
        let t_ss = steady_state_time(&tr, &rule).unwrap();
        let bound = 32f64.ln();
        assert!(t_ss > bound - 1.0 && t_ss <= bound + 1e-3, "{t_ss}");
        let r = normalization_reference(&tr, 5.0, &rule).unwrap();
        assert_eq!(r.t_ref_ps, t_ss);
        assert!((r.value - 0.5).abs() < 0.01);
        let short = tr.window(0.0, 2.0);
        assert!(matches!(steady_state_time(&short, &rule), Err(Error::SteadyStateNotReached { .. })));
    }

    #[test]
    fn bunching_classes() {
        let mk = |f: fn(f64) -> f64| {
            let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.001).collect();
            let values = grid.iter().map(|&t| f(t)).collect();
            CorrelationTrace::new(Axis::Tau, grid, values)
        };
        assert_eq!(classify_bunching(&mk(|t| 1.0 - (-t * 50.0).exp()), 0.0667).unwrap(), Bunching::Antibunched);
        assert_eq!(classify_bunching(&mk(|t| 1.0 + (-t * 50.0).exp()), 0.0667).unwrap(), Bunching::Bunched);
        assert_eq!(classify_bunching(&mk(|_| 1.0), 0.0667).unwrap(), Bunching::Flat);
    }

    #[test]
    fn spectrum_finds_known_tone() {
        // 500 cm⁻¹ cosine sampled every fs for 4 ps
        let omega = crate::units::cm_to_rad_per_fs(500.0);
        let grid: Vec<f64> = (0..=4000).map(|i| i as f64 / 1000.0).collect();
        let values = grid.iter().map(|&t| 1.0 + 0.3 * (omega * t * 1000.0).cos()).collect();
        let s = spectrum(&CorrelationTrace::new(Axis::Tau, grid, values)).unwrap();
        assert!((s.bin_width_cm() - 8.33).abs() < 0.01);
        let peak = s.peak_near(500.0, 60.0).unwrap();
        assert!((peak - 500.0).abs() <= s.bin_width_cm());
    }

    #[test]
    fn normalizing_by_tiny_reference_is_refused() {
        let tr = sine_trace(0.1, |t| t);
        assert!(tr.normalized_by(1e-15).is_err());
        let reg = RegressionRun {
            first: Some(Detector::Photon),
            tau_ps: tr.grid.clone(),
            photon: tr.values.clone(),
            phonon: tr.values.clone(),
            trace: tr.values.clone(),
            ..RegressionRun::default()
        };
        assert!(!reg.g2(Detector::Photon, 1e-8, 1e-8).normalized);
        assert!(reg.g2(Detector::Photon, 0.5, 0.5).normalized);
    }

    #[test]
    fn adiabatic_phonon_detector_matches_diabatic_when_undisplaced() {
        let params = VibronicParams { delta: 0.0, n_levels: 5, ..VibronicParams::default() };
        let bath = BathParams { eta: 0.0, ..BathParams::default() };
        let a = Simulator::with_phonon_basis(params.clone(), bath.clone(), PropagatorConfig::default(), PhononBasis::Adiabatic).unwrap();
        let d = Simulator::new(params, bath, PropagatorConfig::default()).unwrap();
        assert_eq!(a.detectors.phonon, d.detectors.phonon);
    }
}
