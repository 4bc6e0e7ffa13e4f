//! Cross-module flows: pulse → dynamics → emitted mode → shots → moments →
//! state reconstruction, and a reflection sweep across flux.

use std::f64::consts::PI;

use photonsource::device::{flux_to_frequency, DeviceParams, RateSet};
use photonsource::dynamics::simulate_three_level;
use photonsource::measurement::{extract_field_moments, filtered_mode_state, synthesize_mode_shots, MeasurementConfig};
use photonsource::pulses::{default_sigma, gaussian_pulse};
use photonsource::spectroscopy::{fit_reflection_sweep, ReflectionTrace};
use photonsource::tomography::{fidelity, mle_density_matrix, moments_from_rho, wigner_grid};

#[test]
fn pi_pulse_to_reconstructed_state() {
    let rates = RateSet::table1();
    let pulse = gaussian_pulse(50e-9, default_sigma(50e-9), PI, 0.0, 0.1e-9, rates.gamma_r).unwrap();
    let tr = simulate_three_level(&pulse, 0.0, 251e6, &rates, 0.1e-9).unwrap();
    let [_, rho11, leak] = tr.final_populations();
    assert!(leak < 0.02);
    let state = filtered_mode_state(rho11, tr.final_coherence(), &rates).unwrap();

    let cfg = MeasurementConfig {
        n_shots: 400_000,
        seed: 12,
        ..MeasurementConfig::default()
    };
    let shots = synthesize_mode_shots(&state, &cfg, rates.gamma_1).unwrap();
    let m = extract_field_moments(&shots, 4).unwrap();
    let exact = moments_from_rho(&state, 4);
    assert!((m.photon_number() - exact.photon_number()).abs() < 4.0 * m.sigma[1][1]);

    let mle = mle_density_matrix(&m).unwrap();
    assert!(mle.converged);
    assert!(fidelity(&mle.rho, &state) > 0.98, "{}", fidelity(&mle.rho, &state));
    let grid = wigner_grid(&mle.rho, 1.4, 21).unwrap();
    assert!(grid.min() < 0.0);
    assert!(!grid.truncation_warning);
}

#[test]
fn reflection_sweep_over_flux() {
    let params = DeviceParams::table1();
    let traces: Vec<ReflectionTrace> = [0.0, 0.05, 0.09]
        .iter()
        .map(|&phi| {
            let f01 = flux_to_frequency(phi, &params).unwrap();
            let freqs: Vec<f64> = (0..121).map(|k| f01 - 3e6 + 50e3 * k as f64).collect();
            ReflectionTrace::from_model(freqs, f01, 270e3, 188e3 + 100e3 * phi, 0.0).unwrap()
        })
        .collect();
    let fits = fit_reflection_sweep(&traces);
    for (fit, phi) in fits.iter().zip([0.0, 0.05, 0.09]) {
        let fit = fit.as_ref().unwrap();
        assert!((fit.gamma_2 - (188e3 + 100e3 * phi)).abs() < 1.0);
        assert!((fit.f01 - flux_to_frequency(phi, &params).unwrap()).abs() < 1.0);
    }
}
