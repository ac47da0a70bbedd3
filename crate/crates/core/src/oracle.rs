//! Brute-force references for small or closed instances.
//!
//! Everything here is rebuilt from the raw parameters with dense Kronecker
//! algebra and exact exponentials, sharing no kernel code with the
//! propagator. Slow by design.

use std::io::Write;

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::bath::{expansion_coeffs, terminator_strength, BathParams};
use crate::correlations::{Axis, CorrelationTrace, Detector, Simulator};
use crate::error::{Error, Result};
use crate::heom::{AdoHierarchy, Integrator, Propagator, PropagatorConfig};
use crate::model::{DriveField, VibronicParams};
use crate::units::{thermal_energy_cm, FS_PER_PS, RAD_PER_FS_PER_CM};

/// Largest hierarchy accepted by [`piecewise_exponential_step`].
pub const MAX_ORACLE_ADOS: usize = 60;
/// Largest system dimension accepted by [`piecewise_exponential_step`].
pub const MAX_ORACLE_DIM: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, max_rel_err: f64, tolerance: f64, details: impl Into<String>) -> Self {
        Self { name: name.into(), max_rel_err, tolerance, pass: max_rel_err < tolerance, details: details.into() }
    }

    pub fn failed(name: impl Into<String>, err: &Error) -> Self {
        Self { name: name.into(), max_rel_err: f64::INFINITY, tolerance: 0.0, pass: false, details: err.to_string() }
    }
}

/// One JSON object per line.
pub fn write_reports<W: Write>(mut w: W, reports: &[OracleReport]) -> Result<()> {
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::TraceFormat(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn cz(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (n, m) = (a.nrows(), b.nrows());
    Array2::from_shape_fn((n * m, n * m), |(i, j)| a[[i / m, j / m]] * b[[i % m, j % m]])
}

fn eye(n: usize) -> Array2<C64> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { cz(1.0) } else { cz(0.0) })
}

fn dag(m: &Array2<C64>) -> Array2<C64> {
    m.t().mapv(|z| z.conj())
}

/// Operators in rad/fs rebuilt from the parameters: electronic ⊗ vibrational.
struct DenseModel {
    dim: usize,
    h0: Array2<C64>,
    flip: Array2<C64>,
    q: Array2<C64>,
    a: Array2<C64>,
    b: Array2<C64>,
    drive_amp: f64,
    omega: f64,
}

impl DenseModel {
    fn new(p: &VibronicParams) -> Result<Self> {
        p.validate()?;
        let n = p.n_levels;
        let r = RAD_PER_FS_PER_CM;
        let mut bv = Array2::zeros((n, n));
        for k in 1..n {
            bv[[k - 1, k]] = cz((k as f64).sqrt());
        }
        let num = dag(&bv).dot(&bv);
        let x_vib = (&bv + &dag(&bv)).mapv(|z| z * std::f64::consts::FRAC_1_SQRT_2);
        let mut pe = Array2::zeros((2, 2));
        pe[[1, 1]] = cz(1.0);
        let mut sx = Array2::zeros((2, 2));
        sx[[0, 1]] = cz(1.0);
        sx[[1, 0]] = cz(1.0);
        let mut lower = Array2::zeros((2, 2));
        lower[[0, 1]] = cz(1.0);
        let i_v = eye(n);
        let i_e = eye(2);
        // H = ω₀(b†b + ½) + |e⟩⟨e|[ω_eg + λ − ω₀Δ(b + b†)/√2]
        let lam = p.omega_0 * p.delta * p.delta / 2.0;
        let h_vib = (&num + &i_v.mapv(|z| z * 0.5)).mapv(|z| z * p.omega_0);
        let h_e_shift = (&i_v.mapv(|z| z * (p.omega_eg + lam)) - &x_vib.mapv(|z| z * (p.omega_0 * p.delta))).to_owned();
        let h = kron(&i_e, &h_vib) + kron(&pe, &h_e_shift);
        Ok(Self {
            dim: 2 * n,
            h0: h.mapv(|z| z * r),
            flip: kron(&sx, &i_v),
            q: kron(&i_e, &x_vib),
            a: kron(&lower, &i_v),
            b: kron(&i_e, &bv),
            drive_amp: p.drive_amp * r,
            omega: p.omega_eg * r,
        })
    }

    fn hamiltonian(&self, t_fs: f64) -> Array2<C64> {
        let f = 2.0 * self.drive_amp * (self.omega * t_fs).cos();
        &self.h0 + &self.flip.mapv(|z| z * f)
    }

    fn detector(&self, d: Detector) -> &Array2<C64> {
        match d {
            Detector::Photon => &self.a,
            Detector::Phonon => &self.b,
        }
    }
}

fn to_na(m: &Array2<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `exp(−i K h)` for Hermitian `K`.
fn unitary_exp(k: &Array2<C64>, h: f64) -> Result<Array2<C64>> {
    let n = k.nrows();
    let sym = to_na(&((k + &dag(k)).mapv(|z| z * 0.5)));
    let eig = nalgebra::SymmetricEigen::try_new(sym, 1e-15, 10_000).ok_or(Error::EigenNoConvergence)?;
    let v = &eig.eigenvectors;
    let phases = DMatrix::from_fn(n, n, |i, j| if i == j { C64::new(0.0, -eig.eigenvalues[i] * h).exp() } else { cz(0.0) });
    Ok(from_na(&(v * phases * v.adjoint())))
}

/// Fourth-order Magnus step over `[t, t + h]` with Gauss–Legendre nodes.
fn magnus_step(m: &DenseModel, t: f64, h: f64) -> Result<Array2<C64>> {
    let s = 3f64.sqrt() / 6.0;
    let h1 = m.hamiltonian(t + (0.5 - s) * h);
    let h2 = m.hamiltonian(t + (0.5 + s) * h);
    // Ω = −i h (H₁+H₂)/2 − (√3/12) h² [H₂, H₁]; write Ω = −i h K with K Hermitian
    let comm = h2.dot(&h1) - h1.dot(&h2);
    let k = (&h1 + &h2).mapv(|z| z * 0.5) + comm.mapv(|z| z * C64::new(0.0, -(3f64.sqrt() / 12.0) * h));
    unitary_exp(&k, h)
}

/// Thermal ensemble `{(p_k, ψ_k)}` of the undriven Hamiltonian.
fn thermal_ensemble(m: &DenseModel, temperature: f64) -> Result<(Vec<f64>, Array2<C64>)> {
    let eig = nalgebra::SymmetricEigen::try_new(to_na(&m.h0), 1e-15, 10_000).ok_or(Error::EigenNoConvergence)?;
    let kt = thermal_energy_cm(temperature) * RAD_PER_FS_PER_CM;
    let e0 = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = eig.eigenvalues.iter().map(|e| (-(e - e0) / kt).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok((w.iter().map(|x| x / z).collect(), from_na(&eig.eigenvectors)))
}

/// All four `G(t_anchor, τ)` of a closed system, `[first][second]` in
/// [`Detector::ALL`] order.
pub struct UnitaryCorrelations {
    pub tau_ps: Vec<f64>,
    pub t_anchor_ps: f64,
    pub values: [[Vec<f64>; 2]; 2],
}

impl UnitaryCorrelations {
    pub fn trace(&self, first: Detector, second: Detector) -> CorrelationTrace {
        CorrelationTrace {
            op_first: Some(first),
            op_second: Some(second),
            t_anchor: Some(self.t_anchor_ps),
            ..CorrelationTrace::new(Axis::Tau, self.tau_ps.clone(), self.values[first as usize][second as usize].clone())
        }
    }
}

/// Wavefunction-level two-time correlations without a bath.
///
/// Each thermal eigenstate is propagated to `t_anchor_ps` under the driven
/// Hamiltonian, hit with the first detector, propagated over the τ grid and
/// read out as `‖c₂ φ(τ)‖²`; results are summed with Boltzmann weights. The
/// τ grid must be a multiple of `dt_fs`.
pub fn unitary_correlations(
    params: &VibronicParams,
    t_anchor_ps: f64,
    tau_grid_ps: &[f64],
    dt_fs: f64,
) -> Result<UnitaryCorrelations> {
    let m = DenseModel::new(params)?;
    let (p, psi0) = thermal_ensemble(&m, params.temperature)?;
    let steps = |span_fs: f64| -> Result<usize> {
        let n = (span_fs / dt_fs).round();
        if (n * dt_fs - span_fs).abs() > 1e-6 * dt_fs {
            return Err(crate::error::invalid("tau_grid", "points must be multiples of dt"));
        }
        Ok(n as usize)
    };
    let mut psi = psi0;
    let mut t = 0.0;
    for _ in 0..steps(t_anchor_ps * FS_PER_PS)? {
        psi = magnus_step(&m, t, dt_fs)?.dot(&psi);
        t += dt_fs;
    }
    t = t_anchor_ps * FS_PER_PS;
    // columns: first detector applied to each eigenstate
    let mut seeded = [m.a.dot(&psi), m.b.dot(&psi)];
    let mut values: [[Vec<f64>; 2]; 2] = Default::default();
    let mut done = 0usize;
    for &tau in tau_grid_ps {
        let target = steps(tau * FS_PER_PS)?;
        if target < done {
            return Err(crate::error::invalid("tau_grid", "must be increasing"));
        }
        while done < target {
            let u = magnus_step(&m, t, dt_fs)?;
            for s in seeded.iter_mut() {
                *s = u.dot(s);
            }
            done += 1;
            t = t_anchor_ps * FS_PER_PS + done as f64 * dt_fs;
        }
        for (fi, s) in seeded.iter().enumerate() {
            for (si, d) in Detector::ALL.iter().enumerate() {
                let out = m.detector(*d).dot(s);
                let g: f64 = (0..out.ncols()).map(|k| p[k] * out.column(k).iter().map(|z| z.norm_sqr()).sum::<f64>()).sum();
                values[fi][si].push(g);
            }
        }
    }
    Ok(UnitaryCorrelations { tau_ps: tau_grid_ps.to_vec(), t_anchor_ps, values })
}

/// `Tr[c₂†c₂ U(t+τ, t) c₁ ρ(t) c₁† U†]` for a closed system.
pub fn unitary_two_time(
    params: &VibronicParams,
    bath: &BathParams,
    t_anchor_ps: f64,
    tau_grid_ps: &[f64],
    first: Detector,
    second: Detector,
    dt_fs: f64,
) -> Result<CorrelationTrace> {
    if bath.eta != 0.0 {
        return Err(Error::OracleNeedsClosedSystem(bath.eta));
    }
    Ok(unitary_correlations(params, t_anchor_ps, tau_grid_ps, dt_fs)?.trace(first, second))
}

/// Sparse row-major matrix for the hierarchy generator.
struct Sparse {
    rows: Vec<Vec<(usize, C64)>>,
}

impl Sparse {
    fn add_block(&mut self, r0: usize, c0: usize, block: &Array2<C64>) {
        for ((i, j), v) in block.indexed_iter() {
            if *v != cz(0.0) {
                self.rows[r0 + i].push((c0 + j, *v));
            }
        }
    }

    fn apply(&self, x: &[C64], out: &mut [C64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|(j, v)| v * x[*j]).sum();
        }
    }

    fn norm1_bound(&self) -> f64 {
        self.rows.iter().map(|r| r.iter().map(|(_, v)| v.norm()).sum::<f64>()).fold(0.0, f64::max)
    }
}

/// Advance `state` by `dt` (fs) with the exact exponential of the full
/// hierarchy generator, drive frozen at the step midpoint.
///
/// The generator is assembled from Kronecker forms in the unscaled ADO
/// convention: for row-major vec, `AX ↦ (A ⊗ 1)` and `XA ↦ (1 ⊗ Aᵀ)`.
pub fn piecewise_exponential_step(
    params: &VibronicParams,
    bath: &BathParams,
    state: &AdoHierarchy,
    dt: f64,
) -> Result<AdoHierarchy> {
    let m = DenseModel::new(params)?;
    let d = m.dim;
    let n_ado = state.len();
    if n_ado > MAX_ORACLE_ADOS || d > MAX_ORACLE_DIM {
        return Err(Error::OracleTooLarge(format!(
            "{n_ado} ADOs of dimension {d}; cap is {MAX_ORACLE_ADOS} ADOs of dimension {MAX_ORACLE_DIM}"
        )));
    }
    if state.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: state.dim() });
    }
    let modes = expansion_coeffs(bath)?;
    let delta_k = terminator_strength(bath)? * RAD_PER_FS_PER_CM;
    let h = m.hamiltonian(state.time + 0.5 * dt);
    let id = eye(d);
    let left = |a: &Array2<C64>| kron(a, &id);
    let right = |a: &Array2<C64>| kron(&id, &a.t().to_owned());
    let dd = d * d;
    let liou = (left(&h) - right(&h)).mapv(|z| z * C64::new(0.0, -1.0));
    let (lq, rq) = (left(&m.q), right(&m.q));
    let q2 = m.q.dot(&m.q);
    let double_comm = left(&q2) - lq.dot(&rq).mapv(|z| z * 2.0) + right(&q2);
    let up = (&lq - &rq).mapv(|z| z * C64::new(0.0, -1.0));

    let hier = state.hierarchy();
    let mut g = Sparse { rows: vec![Vec::new(); n_ado * dd] };
    for (i, idx) in hier.indices().iter().enumerate() {
        let gamma: f64 = idx.counts.iter().zip(&modes).map(|(n, md)| *n as f64 * md.rate_fs()).sum();
        let diag = &liou - &double_comm.mapv(|z| z * delta_k) - &eye(dd).mapv(|z| z * gamma);
        g.add_block(i * dd, i * dd, &diag);
        for (k, md) in modes.iter().enumerate() {
            let c = md.coeff_fs();
            if c.norm() == 0.0 {
                continue;
            }
            let mut raised = idx.clone();
            raised.counts[k] += 1;
            if let Some(j) = hier.position(&raised) {
                g.add_block(i * dd, j * dd, &up);
            }
            if idx.counts[k] > 0 {
                let mut lowered = idx.clone();
                lowered.counts[k] -= 1;
                let j = hier.position(&lowered).expect("lower neighbour exists");
                let n = idx.counts[k] as f64;
                let down = (lq.mapv(|z| z * c) - rq.mapv(|z| z * c.conj())).mapv(|z| z * C64::new(0.0, -n));
                g.add_block(i * dd, j * dd, &down);
            }
        }
    }

    let mut v: Vec<C64> = Vec::with_capacity(n_ado * dd);
    for i in 0..n_ado {
        v.extend(state.ado_unscaled(i).iter());
    }
    // Taylor series of exp(G h / s) applied s times
    let norm = g.norm1_bound() * dt;
    let s = (norm / 0.25).ceil().max(1.0) as usize;
    let hs = dt / s as f64;
    let mut term = vec![cz(0.0); v.len()];
    let mut next = vec![cz(0.0); v.len()];
    for _ in 0..s {
        term.copy_from_slice(&v);
        for k in 1..60 {
            g.apply(&term, &mut next);
            let scale = hs / k as f64;
            let mut biggest = 0.0_f64;
            for (t, n) in term.iter_mut().zip(&next) {
                *t = n * scale;
                biggest = biggest.max(t.norm());
            }
            for (a, t) in v.iter_mut().zip(&term) {
                *a += t;
            }
            if biggest < 1e-20 {
                break;
            }
        }
    }
    let mut out = state.clone();
    for i in 0..n_ado {
        let block = Array2::from_shape_vec((d, d), v[i * dd..(i + 1) * dd].to_vec()).expect("square block");
        out.set_ado_unscaled(i, &block)?;
    }
    out.time = state.time + dt;
    Ok(out)
}

/// Largest `|x − y|` over all stored entries divided by the largest `|y|`.
pub fn relative_difference(x: &[C64], y: &[C64]) -> f64 {
    let num = x.iter().zip(y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let den = y.iter().map(|b| b.norm()).fold(0.0, f64::max);
    num / den
}

fn trace_difference(x: &CorrelationTrace, y: &CorrelationTrace) -> f64 {
    let num = x.values.iter().zip(&y.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = y.values.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Reduced instance small enough for the dense hierarchy oracle.
pub fn small_instance() -> (VibronicParams, BathParams, PropagatorConfig) {
    let params = VibronicParams { omega_eg: 1000.0, omega_0: 200.0, n_levels: 3, ..VibronicParams::default() };
    let bath = BathParams::default();
    let config = PropagatorConfig { depth: 3, ..PropagatorConfig::default() };
    (params, bath, config)
}

/// Compare the HEOM integrator against exact piecewise exponentials on
/// [`small_instance`]: one step from a driven, bath-correlated state, and the
/// drift after `n_steps` steps.
///
/// The propagator is given the same midpoint-frozen drive as the oracle for
/// each compared step, so the difference is the integrator's truncation
/// error alone.
pub fn check_integrator(integrator: Integrator, n_steps: usize) -> Vec<OracleReport> {
    let name = match integrator {
        Integrator::Rk4 => "rk4",
        Integrator::LawsonRk4 => "lawson_rk4",
    };
    let run = || -> Result<(f64, f64)> {
        let (params, bath, config) = small_instance();
        let config = PropagatorConfig { integrator, ..config };
        let dt = config.dt;
        let sim = Simulator::new(params.clone(), bath.clone(), config.clone())?.with_pre_equilibration(200.0);
        let drive = DriveField::from_params(&params);
        let mut prop = sim.propagator()?;
        let mut state = sim.initial_state(&mut prop)?;
        prop.propagate_with(&mut state, 50.0, |_, _| {})?;
        let mut frozen_step = |s: &mut AdoHierarchy| -> Result<()> {
            prop.set_drive(drive.frozen_at(s.time + 0.5 * dt));
            let t_end = s.time + dt;
            prop.propagate_with(s, t_end, |_, _| {})
        };

        let exact = piecewise_exponential_step(&params, &bath, &state, dt)?;
        let mut one = state.clone();
        frozen_step(&mut one)?;
        let step_err = relative_difference(one.as_slice(), exact.as_slice());

        let mut heom = state.clone();
        let mut oracle = state;
        for _ in 0..n_steps {
            oracle = piecewise_exponential_step(&params, &bath, &oracle, dt)?;
            frozen_step(&mut heom)?;
        }
        Ok((step_err, relative_difference(heom.as_slice(), oracle.as_slice())))
    };
    match run() {
        Ok((step, drift)) => vec![
            OracleReport::new(format!("{name}_single_step"), step, 1e-10, "one 0.05 fs step, small instance"),
            OracleReport::new(format!("{name}_drift"), drift, 1e-6, format!("{n_steps} steps, small instance")),
        ],
        Err(e) => vec![OracleReport::failed(format!("{name}_single_step"), &e), OracleReport::failed(format!("{name}_drift"), &e)],
    }
}

/// Regression-computed correlations versus [`unitary_correlations`] for
/// every detector pair, without a bath. The oracle runs at half the
/// propagator's step so that its own discretization error (fourth order,
/// ~1e−7 relative at 0.05 fs over 5 ps) stays well below the tolerance.
pub fn check_regression(params: &VibronicParams, t_anchor_ps: f64, tau_end_ps: f64, config: &PropagatorConfig) -> Vec<OracleReport> {
    let run = || -> Result<Vec<OracleReport>> {
        let bath = BathParams { eta: 0.0, temperature: params.temperature, ..BathParams::default() };
        let sim = Simulator::new(params.clone(), bath, config.clone())?;
        let anchor_run = sim.time_run(t_anchor_ps, &[t_anchor_ps])?;
        let anchor = anchor_run.snapshot_at(t_anchor_ps).expect("anchor recorded");
        let mut reports = Vec::new();
        let mut oracle: Option<UnitaryCorrelations> = None;
        for first in Detector::ALL {
            let reg = sim.regress(anchor, first, tau_end_ps)?;
            let o = match &oracle {
                Some(o) => o,
                None => oracle.insert(unitary_correlations(params, t_anchor_ps, &reg.tau_ps, 0.5 * config.dt)?),
            };
            for second in Detector::ALL {
                let err = trace_difference(&reg.unnormalized(second), &o.trace(first, second));
                reports.push(OracleReport::new(
                    format!("regression_{first}_{second}"),
                    err,
                    1e-6,
                    format!("closed system, anchor {t_anchor_ps} ps, tau up to {tau_end_ps} ps; error relative to trace maximum"),
                ));
            }
        }
        Ok(reports)
    };
    run().unwrap_or_else(|e| vec![OracleReport::failed("regression", &e)])
}

/// Undriven closed-system step versus `U ρ U†` with `U = exp(−i H_S dt)`.
pub fn check_closed_step() -> OracleReport {
    let run = || -> Result<f64> {
        let (params, _, config) = small_instance();
        let params = VibronicParams { drive_amp: 0.0, ..params };
        let bath = BathParams { eta: 0.0, ..BathParams::default() };
        let m = DenseModel::new(&params)?;
        let (_, psi) = thermal_ensemble(&m, 5000.0)?;
        // coherent mixture so that the commutator is nonzero
        let mix = (&psi.column(0).to_owned() + &psi.column(3)).mapv(|z| z * std::f64::consts::FRAC_1_SQRT_2);
        let mut rho = Array2::zeros((m.dim, m.dim));
        for i in 0..m.dim {
            for j in 0..m.dim {
                rho[[i, j]] = mix[i] * mix[j].conj() * 0.5 + if i == j { cz(0.5 / m.dim as f64) } else { cz(0.0) };
            }
        }
        let prop = Propagator::new(
            &crate::model::build_system(&params)?,
            &bath,
            DriveField::Off,
            &config,
        )?;
        let state = prop.initial_state(&crate::model::DensityMatrix::new(rho.clone(), crate::model::Basis::Diabatic), 0.0)?;
        let stepped = piecewise_exponential_step(&params, &bath, &state, 10.0)?;
        let u = unitary_exp(&m.h0, 10.0)?;
        let want = u.dot(&rho).dot(&dag(&u));
        Ok(relative_difference(stepped.ado(0).as_slice().unwrap(), want.as_slice().unwrap()))
    };
    match run() {
        Ok(e) => OracleReport::new("closed_step_vs_unitary", e, 1e-12, "drive off, no bath, 10 fs step"),
        Err(e) => OracleReport::failed("closed_step_vs_unitary", &e),
    }
}

/// Every oracle check at its default tolerance.
pub fn run_suite() -> Vec<OracleReport> {
    let mut reports = vec![check_closed_step()];
    reports.extend(check_integrator(Integrator::Rk4, 1000));
    reports.extend(check_integrator(Integrator::LawsonRk4, 1000));
    reports.extend(check_regression(&VibronicParams::default(), 3.5, 2.0, &PropagatorConfig::default()));
    reports
}
