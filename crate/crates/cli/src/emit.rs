use std::f64::consts::PI;

use anyhow::Context;
use num_complex::Complex64 as C;
use serde_json::{json, Value};

use photonsource::device::{flux_to_frequency, rates_at_flux, self_consistent_dephasing_time, GammaNModel};
use photonsource::dynamics::{simulate_three_level, BlochState, QubitModel};
use photonsource::pulses::{
    apply_cancellation, calibrate_cancellation, default_sigma, emitted_field, field_to_voltage, gaussian_pulse,
    ideal_emission_photons, leakage_estimate, output_field, photon_number, suppression_db, ComplexEnvelope,
};

use crate::config::ExperimentConfig;
use crate::output::Output;

/// Free decay used for the π/2 photon count: long enough for e^{-2Γ2 t} to vanish.
const FREE_DECAY: f64 = 12e-6;
const FREE_DECAY_DT: f64 = 1e-9;

pub fn run(cfg: &ExperimentConfig, o: &mut Output) -> anyhow::Result<Value> {
    let p = &cfg.pulse;
    let dev = &cfg.device;
    let t_phase = self_consistent_dephasing_time(&[p.flux], dev)?.t;
    let rates = rates_at_flux(p.flux, t_phase, dev, &GammaNModel::default())?;
    let f_q = flux_to_frequency(p.flux, dev)?;

    let sigma = p.sigma.unwrap_or_else(|| default_sigma(p.duration));
    let pulse = gaussian_pulse(p.duration, sigma, p.area_pi * PI, p.detuning, p.dt, rates.gamma_r).context("pulse")?;
    let n_pulse = pulse.len();
    let drive = pulse.padded((p.tail / p.dt).round() as usize);
    let traj = simulate_three_level(&drive, p.detuning, dev.anharm, &rates, p.dt).context("dynamics")?;
    let emission = emitted_field(&traj, rates.gamma_r)?;
    let reflected = output_field(&drive, &traj, rates.gamma_r)?;
    let cancelled = apply_cancellation(&reflected, &drive, &p.cancellation)?;

    // the drive alone through the same setting is the leaked part
    let leak = apply_cancellation(&drive, &drive, &p.cancellation)?;
    let n_pi = pulse.energy();
    let n_leak = leak.energy();
    let supp = suppression_db(n_pi, n_leak);
    let cal = calibrate_cancellation(&pulse, &pulse, &p.calibration_start)?;
    if !cal.converged {
        o.warn(format!("cancellation calibration did not converge after {} iterations", cal.iterations));
    }

    // photon accounting on voltage records at the qubit frequency
    let window = (0.0, drive.duration());
    let n_out = photon_number(&field_to_voltage(&cancelled, f_q, dev.z0), C::new(0.0, 0.0), f_q, dev.z0, window)?;
    let n_emit = emission.energy();

    let half = BlochState::new(C::new(0.0, -0.5), 0.0)?;
    let free_drive = ComplexEnvelope::zeros((FREE_DECAY / FREE_DECAY_DT) as usize + 1, FREE_DECAY_DT)?;
    let free = QubitModel::new(&rates).bloch(half, &free_drive, 0.0, FREE_DECAY_DT)?;
    let v_free = field_to_voltage(&emitted_field(&free, rates.gamma_r)?, f_q, dev.z0);
    let n_q = photon_number(&v_free, C::new(0.0, 0.0), f_q, dev.z0, (0.0, v_free.duration()))?;
    let n_q_formula = ideal_emission_photons(&rates);
    if (n_q / n_q_formula - 1.0).abs() > 0.005 {
        o.warn(format!("free-decay photon number {n_q:.5} differs from Γr/(8Γ2) = {n_q_formula:.5} by more than 0.5%"));
    }
    let n_leak_referred = leakage_estimate(n_leak, n_q, &rates)?;

    let end = traj.populations[n_pulse - 1];
    let a = p.coupler_attenuation;
    o.file("drive.csv", |w| Ok(drive.write_csv(w)?))?;
    o.file("drive_port.csv", |w| Ok(drive.scaled(C::new(1.0 / a, 0.0)).write_csv(w)?))?;
    o.file("cancellation_port.csv", |w| {
        let beta = apply_cancellation(&drive.scaled(C::new(0.0, 0.0)), &drive, &p.cancellation)?;
        Ok(beta.scaled(C::new(1.0 / a, 0.0)).write_csv(w)?)
    })?;
    o.file("output.csv", |w| Ok(reflected.write_csv(w)?))?;
    o.file("output_cancelled.csv", |w| Ok(cancelled.write_csv(w)?))?;
    o.file("emission.csv", |w| Ok(emission.write_csv(w)?))?;
    o.file("trajectory.csv", |w| Ok(traj.write_csv(w)?))?;

    Ok(json!({
        "qubit_frequency": f_q,
        "rates": rates,
        "pulse": {
            "area": p.area_pi * PI,
            "sigma": sigma,
            "rho11_end": end[1],
            "rho22_end": end[2],
            "max_leakage_population": traj.max_leakage(),
        },
        "photons": {
            "n_q": n_q,
            "n_q_formula": n_q_formula,
            "n_pi_drive": n_pi,
            "n_pi_coupler_port": n_pi / (a * a),
            "n_emitted_coherent": n_emit,
            "n_output_cancelled": n_out,
        },
        "cancellation": {
            "setting": p.cancellation,
            "suppression_db": supp,
            "n_leak": n_leak,
            "n_leak_referred": n_leak_referred,
            "calibrated": {
                "setting": cal.setting,
                "suppression_db": cal.suppression_db(),
                "iterations": cal.iterations,
                "converged": cal.converged,
            },
        },
    }))
}
