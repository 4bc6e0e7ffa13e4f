use anyhow::Context;
use num_complex::Complex64 as C;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use photonsource::device::{frequency_to_flux, rates_at_flux, self_consistent_dephasing_time, GammaNModel};
use photonsource::spectroscopy::{
    fit_phase_curve_with, fit_reflection_fixed_phase, fit_reflection_sweep, phase_model, PhaseConstraint, PhaseFitOptions,
    ReflectionTrace,
};

use crate::config::ExperimentConfig;
use crate::output::Output;

/// Delays differing by 1/(2·Δf) give identical phases on a grid with spacing
/// Δf; stay just below that.
fn alias_limit(freqs: &[f64]) -> f64 {
    let mut sorted = freqs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let df = sorted.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    if df.is_finite() {
        0.45 / df
    } else {
        PhaseFitOptions::default().tau_max
    }
}

pub fn run(cfg: &ExperimentConfig, o: &mut Output) -> anyhow::Result<Value> {
    let s = &cfg.sweep;
    let dev = &cfg.device;
    let fluxes = s
        .frequencies
        .iter()
        .map(|&f| frequency_to_flux(f, dev))
        .collect::<photonsource::Result<Vec<_>>>()?;
    let t_phase = self_consistent_dephasing_time(&fluxes, dev)?.t;

    let mut truth = Vec::new();
    let mut traces = Vec::new();
    for (k, (&f, &flux)) in s.frequencies.iter().zip(&fluxes).enumerate() {
        let rates = rates_at_flux(flux, t_phase, dev, &GammaNModel::default())?;
        let phi = phase_model(f, &s.mismatch);
        let span = s.span_linewidths * rates.gamma_2;
        let freqs: Vec<f64> = (0..s.n_points)
            .map(|i| f - span / 2.0 + span * i as f64 / (s.n_points - 1) as f64)
            .collect();
        let mut trace = ReflectionTrace::from_model(freqs, f, rates.gamma_r, rates.gamma_2, phi)
            .with_context(|| format!("trace at {f:e} Hz"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let scale = s.noise / 2f64.sqrt();
        for r in &mut trace.r_values {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            *r += C::new(x, y) * scale;
        }
        o.file(&format!("trace_{k:02}.csv"), |w| Ok(trace.write_csv(w)?))?;
        truth.push((f, flux, rates, phi));
        traces.push(trace);
    }

    let fits = fit_reflection_sweep(&traces);
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut entries = Vec::new();
    let mut within = 0;
    for (k, fit) in fits.into_iter().enumerate() {
        let (f, flux, rates, phi) = truth[k];
        let raw = match fit {
            Ok(r) => r,
            Err(e) => {
                o.warn(format!("reflection fit at {f:e} Hz failed: {e}"));
                continue;
            }
        };
        if !raw.converged {
            o.warn(format!("reflection fit at {f:e} Hz did not converge"));
        }
        let comp = match fit_reflection_fixed_phase(&traces[k].compensated(raw.phi), 0.0) {
            Ok(c) => c,
            Err(e) => {
                o.warn(format!("compensated fit at {f:e} Hz failed: {e}"));
                continue;
            }
        };
        let ok = (comp.gamma_r - rates.gamma_r).abs() <= 2.0 * comp.errors[1]
            && (comp.gamma_2 - rates.gamma_2).abs() <= 2.0 * comp.errors[2];
        within += ok as usize;
        points.push((raw.f01, raw.phi));
        rows.push(vec![
            f,
            flux,
            rates.gamma_r,
            rates.gamma_2,
            phi,
            raw.f01,
            raw.errors[0],
            raw.phi,
            raw.errors[3],
            comp.gamma_r,
            comp.errors[1],
            comp.gamma_2,
            comp.errors[2],
        ]);
        entries.push(json!({
            "frequency": f,
            "flux": flux,
            "true": { "gamma_r": rates.gamma_r, "gamma_2": rates.gamma_2, "phi": phi },
            "raw": raw,
            "compensated": comp,
            "within_2sigma": ok,
        }));
    }
    o.table(
        "fits.csv",
        &[
            "frequency",
            "flux",
            "true_gamma_r",
            "true_gamma_2",
            "true_phi",
            "f01",
            "f01_err",
            "phi",
            "phi_err",
            "gamma_r",
            "gamma_r_err",
            "gamma_2",
            "gamma_2_err",
        ],
        rows,
    )?;

    let opts = PhaseFitOptions {
        tau_max: s.tau_max.unwrap_or_else(|| alias_limit(&s.frequencies)),
    };
    let phase = match fit_phase_curve_with(&points, PhaseConstraint::Beta(s.mismatch.beta()), opts) {
        Ok(pf) => {
            if pf.underdetermined {
                o.warn("phase-curve fit is underdetermined");
            }
            if !pf.converged {
                o.warn("phase-curve fit did not converge");
            }
            let model: Vec<Vec<f64>> = points
                .iter()
                .map(|&(f, phi)| vec![f, phi, phase_model(f, &pf.params)])
                .collect();
            o.table("phase_curve.csv", &["frequency", "phi", "phi_model"], model)?;
            json!(pf)
        }
        Err(e) => {
            o.warn(format!("phase-curve fit failed: {e}"));
            Value::Null
        }
    };

    Ok(json!({
        "injected_mismatch": s.mismatch,
        "tau_max": opts.tau_max,
        "n_traces": traces.len(),
        "n_within_2sigma": within,
        "fits": entries,
        "phase_fit": phase,
    }))
}
