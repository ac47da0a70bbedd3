//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a flat `Float64Array`; the layout is given per
//! function.

use vibcorr::bath::{correlation_function, expansion_coeffs, spectral_density};
use vibcorr::correlations::Simulator;
use vibcorr::model::{adiabatize, boltzmann_weights, build_system};
use vibcorr::{BathParams, PropagatorConfig, VibronicParams};
use wasm_bindgen::prelude::*;

/// Largest vibrational basis the page will propagate.
pub const MAX_DEMO_LEVELS: usize = 8;
/// Longest detection run the page will request, ps.
pub const MAX_DEMO_PS: f64 = 3.0;

fn js(e: vibcorr::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn bath(eta: f64, big_lambda: f64, temperature: f64, n_matsubara: usize) -> BathParams {
    BathParams { eta, big_lambda, temperature, n_matsubara }
}

/// `J(ω)` on `n` points in `[0, omega_max]`, then `Re C(t)` and `Im C(t)`
/// on `n` points in `[0, t_max_fs]`: `3n` values.
pub fn bath_curves_impl(
    eta: f64,
    big_lambda: f64,
    temperature: f64,
    n_matsubara: usize,
    omega_max: f64,
    t_max_fs: f64,
    n: usize,
) -> vibcorr::Result<Vec<f64>> {
    let b = bath(eta, big_lambda, temperature, n_matsubara);
    let modes = expansion_coeffs(&b)?;
    let step = |max: f64, i: usize| max * i as f64 / (n.max(2) - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| spectral_density(&b, step(omega_max, i))).collect();
    let c: Vec<_> = (0..n).map(|i| correlation_function(&modes, step(t_max_fs, i))).collect();
    out.extend(c.iter().map(|z| z.re));
    out.extend(c.iter().map(|z| z.im));
    Ok(out)
}

/// Eigenenergies of the undriven vibronic Hamiltonian (cm⁻¹, ascending)
/// followed by their thermal populations: `2 · 2n_levels` values.
pub fn vibronic_levels_impl(
    omega_eg: f64,
    omega0: f64,
    delta: f64,
    n_levels: usize,
    temperature: f64,
) -> vibcorr::Result<Vec<f64>> {
    let params = VibronicParams { omega_eg, omega_0: omega0, delta, n_levels, temperature, ..VibronicParams::default() };
    params.validate()?;
    let transform = adiabatize(&build_system(&params)?.h_s)?;
    let pops = boltzmann_weights(&transform.energies, temperature)?;
    Ok(transform.energies.iter().copied().chain(pops).collect())
}

/// Photon and phonon detection probabilities of the driven model without a
/// bath, every fs up to `t_end_ps`: `2m` values for `m` samples.
pub fn detection_trace_impl(
    omega0: f64,
    delta: f64,
    drive: f64,
    n_levels: usize,
    temperature: f64,
    t_end_ps: f64,
) -> vibcorr::Result<Vec<f64>> {
    if n_levels > MAX_DEMO_LEVELS {
        return Err(vibcorr::Error::InvalidParameter {
            name: "n_levels",
            reason: format!("the demo allows at most {MAX_DEMO_LEVELS}"),
        });
    }
    if !(t_end_ps > 0.0 && t_end_ps <= MAX_DEMO_PS) {
        return Err(vibcorr::Error::InvalidParameter {
            name: "t_end_ps",
            reason: format!("must lie in (0, {MAX_DEMO_PS}]"),
        });
    }
    let t_end_ps = (t_end_ps * 1000.0).round() / 1000.0;
    let params = VibronicParams { omega_0: omega0, delta, drive_amp: drive, n_levels, temperature, ..VibronicParams::default() };
    let sim = Simulator::new(params, bath(0.0, 200.0, temperature, 0), PropagatorConfig::default())?;
    let run = sim.time_run(t_end_ps, &[])?;
    Ok(run.photon.into_iter().chain(run.phonon).collect())
}

#[wasm_bindgen]
pub fn bath_curves(
    eta: f64,
    big_lambda: f64,
    temperature: f64,
    n_matsubara: usize,
    omega_max: f64,
    t_max_fs: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    bath_curves_impl(eta, big_lambda, temperature, n_matsubara, omega_max, t_max_fs, n).map_err(js)
}

#[wasm_bindgen]
pub fn vibronic_levels(omega_eg: f64, omega0: f64, delta: f64, n_levels: usize, temperature: f64) -> Result<Vec<f64>, JsError> {
    vibronic_levels_impl(omega_eg, omega0, delta, n_levels, temperature).map_err(js)
}

#[wasm_bindgen]
pub fn detection_trace(
    omega0: f64,
    delta: f64,
    drive: f64,
    n_levels: usize,
    temperature: f64,
    t_end_ps: f64,
) -> Result<Vec<f64>, JsError> {
    detection_trace_impl(omega0, delta, drive, n_levels, temperature, t_end_ps).map_err(js)
}
