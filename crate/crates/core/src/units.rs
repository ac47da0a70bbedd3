//! Unit conventions.
//!
//! Energies and rates are specified in wavenumbers (cm⁻¹), time in
//! femtoseconds, and ħ = 1. An energy `E` in cm⁻¹ corresponds to an angular
//! frequency `2π c E` in rad/fs.

use std::f64::consts::TAU;

/// Speed of light in cm/fs.
pub const SPEED_OF_LIGHT_CM_PER_FS: f64 = 2.997_924_58e-5;

/// Boltzmann constant in cm⁻¹/K.
pub const BOLTZMANN_CM_PER_K: f64 = 0.695_034_800_486_127_4;

/// Angular frequency (rad/fs) per wavenumber (cm⁻¹).
pub const RAD_PER_FS_PER_CM: f64 = TAU * SPEED_OF_LIGHT_CM_PER_FS;

pub const FS_PER_PS: f64 = 1000.0;

#[inline]
pub fn cm_to_rad_per_fs(energy_cm: f64) -> f64 {
    energy_cm * RAD_PER_FS_PER_CM
}

#[inline]
pub fn rad_per_fs_to_cm(omega: f64) -> f64 {
    omega / RAD_PER_FS_PER_CM
}

/// Thermal energy k_B T in cm⁻¹.
#[inline]
pub fn thermal_energy_cm(temperature_k: f64) -> f64 {
    BOLTZMANN_CM_PER_K * temperature_k
}

/// Oscillation period in fs of a mode with wavenumber `energy_cm`.
#[inline]
pub fn period_fs(energy_cm: f64) -> f64 {
    TAU / cm_to_rad_per_fs(energy_cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn vibrational_period_of_500_wavenumbers() {
        // 1 / (c * 500 cm⁻¹) = 66.713 fs
        assert_relative_eq!(period_fs(500.0), 66.712_819, max_relative = 1e-7);
    }

    #[test]
    fn conversion_roundtrip() {
        let x = 16.68;
        assert_relative_eq!(rad_per_fs_to_cm(cm_to_rad_per_fs(x)), x, max_relative = 1e-15);
    }
}
