//! Overdamped Brownian (Drude–Lorentz) environment and its exponential
//! decomposition.
//!
//! The bath correlation function is written as
//! `C(t) = Σ_k c_k e^{−ν_k t}` with the Drude pole `(ηΛ[cot(βΛ/2) − i], Λ)`
//! followed by Matsubara poles `ν_k = 2πk/β`.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::units::{thermal_energy_cm, RAD_PER_FS_PER_CM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathParams {
    /// Bath reorganization energy η, cm⁻¹.
    pub eta: f64,
    /// Dissipation rate Λ, cm⁻¹.
    pub big_lambda: f64,
    pub temperature: f64,
    /// Number K of Matsubara terms kept explicitly.
    pub n_matsubara: usize,
}

impl Default for BathParams {
    fn default() -> Self {
        Self { eta: 5.0, big_lambda: 200.0, temperature: 298.0, n_matsubara: 2 }
    }
}

/// Relative shift applied to Λ when a Matsubara frequency lands on it.
pub const DEGENERACY_SHIFT: f64 = 1e-6;

impl BathParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(invalid("eta", format!("must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.big_lambda > 0.0) || !self.big_lambda.is_finite() {
            return Err(invalid("big_lambda", format!("must be finite and > 0, got {}", self.big_lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature", format!("must be finite and > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Inverse temperature in cm.
    pub fn beta(&self) -> f64 {
        1.0 / thermal_energy_cm(self.temperature)
    }

    pub fn matsubara_frequency(&self, k: usize) -> f64 {
        std::f64::consts::TAU * k as f64 / self.beta()
    }

    /// Copy with Λ shifted by [`DEGENERACY_SHIFT`] (relative), the documented
    /// way out of [`Error::DegenerateMatsubara`].
    pub fn perturbed(&self) -> Self {
        Self { big_lambda: self.big_lambda * (1.0 + DEGENERACY_SHIFT), ..self.clone() }
    }

    fn check_degeneracy(&self) -> Result<()> {
        let x = self.big_lambda * self.beta() / std::f64::consts::TAU;
        let k = x.round();
        if k >= 1.0 && (x - k).abs() < 1e-9 * k {
            return Err(Error::DegenerateMatsubara { k: k as usize, rate: self.big_lambda });
        }
        Ok(())
    }
}

/// One term `c e^{−ν t}` of the bath correlation function, in cm units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExponentialMode {
    /// Prefactor c_k, cm⁻².
    pub coeff: C64,
    /// Decay rate ν_k, cm⁻¹.
    pub rate: f64,
}

impl ExponentialMode {
    /// Prefactor in (rad/fs)².
    pub fn coeff_fs(&self) -> C64 {
        self.coeff * (RAD_PER_FS_PER_CM * RAD_PER_FS_PER_CM)
    }

    /// Decay rate in 1/fs.
    pub fn rate_fs(&self) -> f64 {
        self.rate * RAD_PER_FS_PER_CM
    }
}

/// `J(ω) = 2ηωΛ / (ω² + Λ²)`
pub fn spectral_density(bath: &BathParams, omega: f64) -> f64 {
    2.0 * bath.eta * omega * bath.big_lambda / (omega * omega + bath.big_lambda * bath.big_lambda)
}

/// Drude mode followed by `n_matsubara` Matsubara modes.
pub fn expansion_coeffs(bath: &BathParams) -> Result<Vec<ExponentialMode>> {
    bath.validate()?;
    bath.check_degeneracy()?;
    let (eta, lam, beta) = (bath.eta, bath.big_lambda, bath.beta());
    let cot = 1.0 / (0.5 * beta * lam).tan();
    let mut modes = Vec::with_capacity(bath.n_matsubara + 1);
    modes.push(ExponentialMode { coeff: C64::new(eta * lam * cot, -eta * lam), rate: lam });
    for k in 1..=bath.n_matsubara {
        let nu = bath.matsubara_frequency(k);
        let c = 4.0 * eta * lam * nu / (beta * (nu * nu - lam * lam));
        modes.push(ExponentialMode { coeff: C64::new(c, 0.0), rate: nu });
    }
    Ok(modes)
}

/// Weight of the Matsubara tail beyond the kept modes, `Σ_{k>K} c_k/ν_k`
/// in cm⁻¹.
///
/// Uses the closed form of the full series, `Σ_{k≥0} Re c_k/ν_k = 2η/(βΛ)`,
/// minus the explicit terms. The hierarchy adds it as the white-noise
/// correction `−Δ_K [Q, [Q, ρ]]`.
pub fn terminator_strength(bath: &BathParams) -> Result<f64> {
    let modes = expansion_coeffs(bath)?;
    let total = 2.0 * bath.eta / (bath.beta() * bath.big_lambda);
    let kept: f64 = modes.iter().map(|m| m.coeff.re / m.rate).sum();
    Ok(total - kept)
}

/// `C(t) = Σ_k c_k e^{−ν_k t}` in cm⁻² for `t` in fs.
pub fn correlation_function(modes: &[ExponentialMode], time_fs: f64) -> C64 {
    modes.iter().map(|m| m.coeff * (-m.rate_fs() * time_fs).exp()).sum()
}
