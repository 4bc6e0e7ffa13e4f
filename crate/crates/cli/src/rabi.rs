use std::f64::consts::PI;

use anyhow::Context;
use num_complex::Complex64 as C;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::{json, Value};

use photonsource::device::{rates_at_flux, self_consistent_dephasing_time, GammaNModel, TWO_PI};
use photonsource::dynamics::{fit_rabi_oscillation, simulate_bloch, RabiFit, RabiParams};
use photonsource::pulses::{field_from_rabi, ComplexEnvelope};

use crate::config::ExperimentConfig;
use crate::output::Output;

/// Detector gains and offsets applied to ⟨σy⟩ and 1 + ⟨σz⟩.
const I_GAIN: f64 = 0.8;
const I_OFFSET: f64 = 0.02;
const P_GAIN: f64 = 1.2;
const P_OFFSET: f64 = -0.01;

struct Sweep {
    taus: Vec<f64>,
    i_sig: Vec<f64>,
    p_sig: Vec<f64>,
    closed: RabiParams,
    fit: photonsource::Result<RabiFit>,
}

pub fn run(cfg: &ExperimentConfig, o: &mut Output) -> anyhow::Result<Value> {
    let r = &cfg.rabi;
    let flux = cfg.pulse.flux;
    let t_phase = self_consistent_dephasing_time(&[flux], &cfg.device)?.t;
    let rates = rates_at_flux(flux, t_phase, &cfg.device, &GammaNModel::default())?;
    let n = (r.t_max / r.dt).round() as usize + 1;

    let sweeps = r
        .omegas
        .par_iter()
        .enumerate()
        .map(|(k, &omega)| -> anyhow::Result<Sweep> {
            let closed = RabiParams::new(omega, &rates)?;
            let a = field_from_rabi(C::new(TWO_PI * omega, 0.0), rates.gamma_r);
            let drive = ComplexEnvelope::constant(a, n, r.dt)?;
            let tr = simulate_bloch(&drive, 0.0, &rates, r.dt).with_context(|| format!("Ω = {omega:e} Hz"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let mut noise = || r.noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let (mut taus, mut i_sig, mut p_sig) = (Vec::new(), Vec::new(), Vec::new());
            for j in (0..tr.len()).step_by(r.decimate) {
                taus.push(tr.times[j]);
                i_sig.push(I_GAIN * tr.bloch[j][1] + I_OFFSET + noise());
                p_sig.push(P_GAIN * (1.0 + tr.bloch[j][2]) + P_OFFSET + noise());
            }
            let fit = fit_rabi_oscillation(&taus, &i_sig, &p_sig, closed.omega_m);
            Ok(Sweep {
                taus,
                i_sig,
                p_sig,
                closed,
                fit,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let target = (rates.gamma_1 + rates.gamma_2) / 2.0;
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for (k, s) in sweeps.iter().enumerate() {
        let omega = r.omegas[k];
        let rows_k = s.taus.iter().zip(&s.i_sig).zip(&s.p_sig).map(|((&t, &i), &p)| vec![t, i, p]);
        o.table(&format!("rabi_{k:02}.csv"), &["tau", "i", "p"], rows_k)?;
        let fit = match &s.fit {
            Ok(f) => f,
            Err(e) => {
                o.warn(format!("Rabi fit at Ω = {omega:e} Hz failed: {e}"));
                continue;
            }
        };
        if !fit.converged {
            o.warn(format!("Rabi fit at Ω = {omega:e} Hz did not converge"));
        }
        rows.push(vec![
            omega,
            fit.omega_m,
            fit.gamma_s,
            fit.gamma_s_err,
            fit.theta_sum() / PI,
            fit.theta_sum_err / PI,
            s.closed.theta_sum() / PI,
        ]);
        entries.push(json!({
            "omega": omega,
            "fit": fit,
            "theta_sum_over_pi": fit.theta_sum() / PI,
            "closed_form": s.closed,
            "closed_form_theta_sum_over_pi": s.closed.theta_sum() / PI,
            "gamma_s_relative_error": fit.gamma_s / target - 1.0,
        }));
    }
    o.table(
        "rabi_fits.csv",
        &["omega", "omega_m", "gamma_s", "gamma_s_err", "theta_sum_over_pi", "theta_sum_err_over_pi", "closed_theta_sum_over_pi"],
        rows,
    )?;
    Ok(json!({
        "rates": rates,
        "gamma_s_expected": target,
        "sweeps": entries,
    }))
}
