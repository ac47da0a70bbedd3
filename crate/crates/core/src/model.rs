//! The vibronic monomer: two electronic levels, one harmonic vibrational mode
//! displaced in the excited state, driven by a monochromatic field.
//!
//! All matrices live in the diabatic product basis `|α, n⟩` ordered
//! `(g,0) … (g,N−1), (e,0) … (e,N−1)`; index `α·N + n`.

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, to_complex};
use crate::units::{cm_to_rad_per_fs, thermal_energy_cm};

/// Physical constants of the monomer. Energies in cm⁻¹, temperature in K.
///
/// The system reorganization energy is not stored: it is always
/// `omega_0 · delta² / 2`, see [`VibronicParams::lambda_reorg`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibronicParams {
    pub omega_eg: f64,
    pub omega_0: f64,
    /// Dimensionless excited-state displacement Δ.
    pub delta: f64,
    /// Drive energy V₀ = E₀ μ_eg (e·d).
    pub drive_amp: f64,
    pub n_levels: usize,
    pub temperature: f64,
}

impl Default for VibronicParams {
    fn default() -> Self {
        Self {
            omega_eg: 1.0e4,
            omega_0: 500.0,
            delta: 1.2,
            drive_amp: 16.68,
            n_levels: 10,
            temperature: 298.0,
        }
    }
}

impl VibronicParams {
    pub fn new(
        omega_eg: f64,
        omega_0: f64,
        delta: f64,
        drive_amp: f64,
        n_levels: usize,
        temperature: f64,
    ) -> Result<Self> {
        let p = Self { omega_eg, omega_0, delta, drive_amp, n_levels, temperature };
        p.validate()?;
        Ok(p)
    }

    /// Parameters specified through the reorganization energy λ instead of Δ.
    pub fn with_lambda(mut self, lambda_reorg: f64) -> Result<Self> {
        if !(lambda_reorg >= 0.0) || !lambda_reorg.is_finite() {
            return Err(invalid("lambda_reorg", format!("must be finite and >= 0, got {lambda_reorg}")));
        }
        self.delta = (2.0 * lambda_reorg / self.omega_0).sqrt();
        self.validate()?;
        Ok(self)
    }

    pub fn lambda_reorg(&self) -> f64 {
        0.5 * self.omega_0 * self.delta * self.delta
    }

    pub fn dim(&self) -> usize {
        2 * self.n_levels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and > 0, got {v}")))
            }
        };
        positive("omega_eg", self.omega_eg)?;
        positive("omega_0", self.omega_0)?;
        positive("temperature", self.temperature)?;
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(invalid("delta", format!("must be finite and >= 0, got {}", self.delta)));
        }
        if !(self.drive_amp >= 0.0) || !self.drive_amp.is_finite() {
            return Err(invalid("drive_amp", format!("must be finite and >= 0, got {}", self.drive_amp)));
        }
        if self.n_levels < 2 {
            return Err(invalid("n_levels", format!("need at least 2 levels, got {}", self.n_levels)));
        }
        Ok(())
    }
}

/// Vibrational ladder operators `(b, b†)` on `n_levels` levels.
pub fn ladder_ops(n_levels: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if n_levels < 2 {
        return Err(invalid("n_levels", format!("need at least 2 levels, got {n_levels}")));
    }
    let mut b = Array2::zeros((n_levels, n_levels));
    for n in 1..n_levels {
        b[[n - 1, n]] = (n as f64).sqrt();
    }
    let b_dag = b.t().to_owned();
    Ok((b, b_dag))
}

/// Concrete matrices of the monomer model, energies in cm⁻¹.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub n_levels: usize,
    pub b: Array2<f64>,
    pub b_dag: Array2<f64>,
    pub h_g: Array2<f64>,
    pub h_e: Array2<f64>,
    /// Block-diagonal system Hamiltonian `diag(h_g, h_e)`.
    pub h_s: Array2<f64>,
    /// Photon annihilation `μ_eg |g⟩⟨e| ⊗ 1` with μ_eg = 1.
    pub a_op: Array2<f64>,
    /// Phonon annihilation `1 ⊗ b`.
    pub b_sys: Array2<f64>,
    /// Bath coupling coordinate `1 ⊗ (b + b†)/√2`.
    pub q_op: Array2<f64>,
    /// Electronic flip `(|e⟩⟨g| + |g⟩⟨e|) ⊗ 1` carried by the drive.
    pub flip: Array2<f64>,
}

impl OperatorSet {
    pub fn dim(&self) -> usize {
        2 * self.n_levels
    }
}

fn embed_both(block: &Array2<f64>) -> Array2<f64> {
    let n = block.nrows();
    let mut out = Array2::zeros((2 * n, 2 * n));
    out.slice_mut(ndarray::s![..n, ..n]).assign(block);
    out.slice_mut(ndarray::s![n.., n..]).assign(block);
    out
}

pub fn build_system(params: &VibronicParams) -> Result<OperatorSet> {
    params.validate()?;
    let n = params.n_levels;
    let (b, b_dag) = ladder_ops(n)?;
    let w0 = params.omega_0;
    let lambda = params.lambda_reorg();

    let mut h_g = Array2::zeros((n, n));
    let mut h_e = Array2::zeros((n, n));
    let coupling = -w0 * (lambda / w0).sqrt();
    for k in 0..n {
        let vib = w0 * (k as f64 + 0.5);
        h_g[[k, k]] = vib;
        h_e[[k, k]] = (params.omega_eg + lambda) + vib;
        if k + 1 < n {
            let off = coupling * ((k + 1) as f64).sqrt();
            h_e[[k, k + 1]] = off;
            h_e[[k + 1, k]] = off;
        }
    }

    let mut h_s = Array2::zeros((2 * n, 2 * n));
    h_s.slice_mut(ndarray::s![..n, ..n]).assign(&h_g);
    h_s.slice_mut(ndarray::s![n.., n..]).assign(&h_e);

    let mut a_op = Array2::zeros((2 * n, 2 * n));
    let mut flip = Array2::zeros((2 * n, 2 * n));
    for k in 0..n {
        a_op[[k, n + k]] = 1.0;
        flip[[k, n + k]] = 1.0;
        flip[[n + k, k]] = 1.0;
    }

    let q_vib = (&b + &b_dag) / std::f64::consts::SQRT_2;
    Ok(OperatorSet {
        n_levels: n,
        b_sys: embed_both(&b),
        q_op: embed_both(&q_vib),
        b,
        b_dag,
        h_g,
        h_e,
        h_s,
        a_op,
        flip,
    })
}

/// Lab-frame drive `V₀ · 2cos(ω_eg t) · (|e⟩⟨g| + |g⟩⟨e|) ⊗ 1` in cm⁻¹, `t` in fs.
pub fn drive_hamiltonian(params: &VibronicParams, time_fs: f64) -> Array2<f64> {
    let n = params.n_levels;
    let amp = DriveField::from_params(params).coefficient(time_fs) / cm_to_rad_per_fs(1.0);
    let mut h = Array2::zeros((2 * n, 2 * n));
    for k in 0..n {
        h[[k, n + k]] = amp;
        h[[n + k, k]] = amp;
    }
    h
}

/// Time dependence of the coefficient multiplying the electronic flip
/// operator, in rad/fs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DriveField {
    Off,
    /// `2 V₀ cos(ω t)`, both in rad/fs.
    Cosine { amplitude: f64, omega: f64 },
    /// Held at a fixed value (rad/fs).
    Frozen(f64),
}

impl DriveField {
    pub fn from_params(params: &VibronicParams) -> Self {
        if params.drive_amp == 0.0 {
            return DriveField::Off;
        }
        DriveField::Cosine {
            amplitude: cm_to_rad_per_fs(params.drive_amp),
            omega: cm_to_rad_per_fs(params.omega_eg),
        }
    }

    #[inline]
    pub fn coefficient(&self, time_fs: f64) -> f64 {
        match *self {
            DriveField::Off => 0.0,
            DriveField::Cosine { amplitude, omega } => 2.0 * amplitude * (omega * time_fs).cos(),
            DriveField::Frozen(v) => v,
        }
    }

    pub fn frozen_at(&self, time_fs: f64) -> Self {
        DriveField::Frozen(self.coefficient(time_fs))
    }
}

/// Diabatic → adiabatic change of basis.
#[derive(Clone, Debug)]
pub struct BasisTransform {
    /// Columns are the adiabatic eigenvectors in the diabatic basis.
    pub u_ad: Array2<f64>,
    /// Ascending eigenvalues, cm⁻¹.
    pub energies: Vec<f64>,
}

impl BasisTransform {
    /// `U† M U`
    pub fn to_adiabatic(&self, m: &Array2<C64>) -> Array2<C64> {
        let u = to_complex(&self.u_ad);
        u.t().dot(m).dot(&u)
    }

    /// `U M U†`
    pub fn to_diabatic(&self, m: &Array2<C64>) -> Array2<C64> {
        let u = to_complex(&self.u_ad);
        u.dot(m).dot(&u.t())
    }
}

/// Diagonalise a real symmetric Hamiltonian.
///
/// Each eigenvector's sign is fixed so that its largest-magnitude component
/// is positive (first such index on ties).
pub fn adiabatize(h: &Array2<f64>) -> Result<BasisTransform> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: h.ncols() });
    }
    let scale = h.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    if linalg::symmetry_deviation(h) > 1e-12 * scale {
        return Err(invalid("h", "Hamiltonian is not symmetric"));
    }
    let (energies, mut u_ad) = linalg::symmetric_eigen(h)?;
    for mut col in u_ad.columns_mut() {
        let peak = col.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        let pivot = col.iter().position(|x| x.abs() >= peak * (1.0 - 1e-10)).unwrap_or(0);
        if col[pivot] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
    Ok(BasisTransform { u_ad, energies })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Diabatic,
    Adiabatic,
}

#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub elements: Array2<C64>,
    pub basis: Basis,
}

impl DensityMatrix {
    pub fn new(elements: Array2<C64>, basis: Basis) -> Self {
        Self { elements, basis }
    }

    /// Pure state `|i⟩⟨i|` on basis index `i`.
    pub fn basis_state(dim: usize, i: usize, basis: Basis) -> Self {
        let mut m = Array2::zeros((dim, dim));
        m[[i, i]] = C64::new(1.0, 0.0);
        Self::new(m, basis)
    }

    pub fn dim(&self) -> usize {
        self.elements.nrows()
    }

    pub fn trace(&self) -> C64 {
        linalg::trace(&self.elements)
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        linalg::hermiticity_deviation(&self.elements)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        linalg::min_eigenvalue_hermitian(&self.elements)
    }

    /// Diagonal elements (real parts).
    pub fn populations(&self) -> Vec<f64> {
        self.elements.diag().iter().map(|z| z.re).collect()
    }

    /// Total population in the excited electronic manifold.
    pub fn excited_population(&self) -> f64 {
        let n = self.dim() / 2;
        self.populations()[n..].iter().sum()
    }

    /// Checks the physical-state invariants: Hermitian to `1e-12`, unit trace
    /// to `1e-10`, eigenvalues ≥ `-1e-10`.
    pub fn check_physical(&self) -> Result<()> {
        let herm = self.hermiticity_deviation();
        if herm > 1e-12 {
            return Err(invalid("density_matrix", format!("not Hermitian (deviation {herm:e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(invalid("density_matrix", format!("trace {tr} != 1")));
        }
        let lo = self.min_eigenvalue()?;
        if lo < -1e-10 {
            return Err(invalid("density_matrix", format!("negative eigenvalue {lo:e}")));
        }
        Ok(())
    }
}

/// Boltzmann state over the adiabatic eigenstates, returned in the diabatic
/// basis.
///
/// Weights `P_k ∝ exp(−ε_k / k_B T)` run over every eigenstate; the excited
/// manifold contributes at the e^(−ω_eg/k_BT) level.
pub fn thermal_state(params: &VibronicParams, transform: &BasisTransform) -> Result<DensityMatrix> {
    params.validate()?;
    let dim = params.dim();
    if transform.energies.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: transform.energies.len() });
    }
    let weights = boltzmann_weights(&transform.energies, params.temperature)?;
    let mut rho_ad = Array2::zeros((dim, dim));
    for (k, w) in weights.iter().enumerate() {
        rho_ad[[k, k]] = C64::new(*w, 0.0);
    }
    let rho = transform.to_diabatic(&rho_ad);
    // Remove round-off asymmetry so the state is Hermitian to machine precision.
    let herm = (&rho + &linalg::dagger(&rho)).mapv(|z| z * 0.5);
    Ok(DensityMatrix::new(herm, Basis::Diabatic))
}

/// Normalised Boltzmann weights for the given level energies (cm⁻¹).
pub fn boltzmann_weights(energies: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature", format!("must be > 0, got {temperature}")));
    }
    let kt = thermal_energy_cm(temperature);
    let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = energies.iter().map(|e| (-(e - e_min) / kt).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}
