use anyhow::Context;
use num_complex::Complex64 as C;
use serde_json::{json, Value};

use photonsource::device::{rates_at_flux, self_consistent_dephasing_time, GammaNModel, RateSet};
use photonsource::dynamics::simulate_three_level;
use photonsource::measurement::{extract_field_moments, filtered_mode_state, synthesize_mode_shots, MomentSet};
use photonsource::pulses::{default_sigma, gaussian_pulse};
use photonsource::tomography::{g2_zero, mle_density_matrix_with, wigner, wigner_grid, DensityMatrix, MleOptions};

use crate::config::{Drive, ExperimentConfig};
use crate::output::{sub_seed, Output};

/// Mode state left behind by `drive`.
fn mode_state(drive: Drive, cfg: &ExperimentConfig, rates: &RateSet) -> anyhow::Result<DensityMatrix> {
    let Some(area) = drive.area() else {
        return Ok(DensityMatrix::fock(0, 3));
    };
    let p = &cfg.pulse;
    let sigma = p.sigma.unwrap_or_else(|| default_sigma(p.duration));
    let pulse = gaussian_pulse(p.duration, sigma, area, p.detuning, p.dt, rates.gamma_r)?;
    let traj = simulate_three_level(&pulse, p.detuning, cfg.device.anharm, rates, p.dt)?;
    Ok(filtered_mode_state(traj.final_populations()[1], traj.final_coherence(), rates)?)
}

/// g2(0) needs a photon number resolved from zero.
fn g2_entry(m: &MomentSet) -> (Value, Option<String>) {
    let (n1, s1) = (m.m[1][1].re, m.sigma[1][1]);
    if !(n1 > 3.0 * s1) {
        return (
            json!({ "defined": false }),
            Some(format!("photon number {n1:.3e} ± {s1:.1e} is not resolved from zero")),
        );
    }
    match g2_zero(m) {
        Ok(g) => (json!({ "defined": true, "value": g.value, "sigma": g.sigma }), None),
        Err(e) => (json!({ "defined": false }), Some(e.to_string())),
    }
}

pub fn run(cfg: &ExperimentConfig, o: &mut Output) -> anyhow::Result<Value> {
    let t = &cfg.tomography;
    let t_phase = self_consistent_dephasing_time(&[cfg.pulse.flux], &cfg.device)?.t;
    let rates = rates_at_flux(cfg.pulse.flux, t_phase, &cfg.device, &GammaNModel::default())?;

    let mut results = serde_json::Map::new();
    for (k, &drive) in t.drives.iter().enumerate() {
        let label = drive.label();
        let state = mode_state(drive, cfg, &rates).with_context(|| format!("{label} drive"))?;
        let mut mcfg = cfg.measurement;
        mcfg.seed = sub_seed(cfg.seed, k as u64);
        let shots = synthesize_mode_shots(&state, &mcfg, rates.gamma_1).context("shot synthesis")?;
        let m = extract_field_moments(&shots, 4)?;

        o.file(&format!("moments_{label}.csv"), |w| {
            use std::io::Write;
            writeln!(w, "n,k,re,im,sigma")?;
            for n in 0..=4 {
                for j in 0..=4 - n {
                    let z = m.get(n, j);
                    writeln!(w, "{n},{j},{:e},{:e},{:e}", z.re, z.im, m.sigma[n][j])?;
                }
            }
            Ok(())
        })?;

        let (g2, g2_flag) = g2_entry(&m);
        let mut flags = m.flags.clone();
        if let Some(f) = g2_flag {
            o.warn(format!("{label}: g2(0) undefined: {f}"));
            flags.push("g2_undefined".into());
        }

        let opts = MleOptions {
            restarts: t.mle_restarts,
            seed: sub_seed(cfg.seed, 100 + k as u64),
            ..MleOptions::default()
        };
        let mle = mle_density_matrix_with(&m, &opts)?;
        if !mle.converged {
            o.warn(format!("{label}: density-matrix fit did not converge"));
        }
        flags.extend(mle.flags.iter().cloned());
        let rho = mle.rho.matrix();
        o.file(&format!("rho_{label}.csv"), |w| {
            use std::io::Write;
            writeln!(w, "row,col,re,im")?;
            for i in 0..rho.nrows() {
                for j in 0..rho.ncols() {
                    writeln!(w, "{i},{j},{:e},{:e}", rho[(i, j)].re, rho[(i, j)].im)?;
                }
            }
            Ok(())
        })?;

        let grid = wigner_grid(&mle.rho, t.wigner_extent, t.wigner_points)?;
        if grid.truncation_warning {
            o.warn(format!("{label}: Wigner grid extends past the trusted Fock truncation"));
        }
        o.file(&format!("wigner_{label}.csv"), |w| Ok(grid.write_csv(w)?))?;
        let w0 = wigner(&mle.rho, C::new(0.0, 0.0))?.value;

        results.insert(
            label.into(),
            json!({
                "n_shots": m.n_shots,
                "photon_number": m.photon_number(),
                "photon_number_sigma": m.sigma[1][1],
                "mean_field": [m.mean_field().re, m.mean_field().im],
                "mean_field_abs": m.mean_field().norm(),
                "mean_field_sigma": m.sigma[0][1],
                "g2": g2,
                "mle": {
                    "populations": mle.rho.populations(),
                    "purity": mle.rho.purity(),
                    "chi2": mle.chi2,
                    "converged": mle.converged,
                },
                "wigner_origin": w0,
                "wigner_min": grid.min(),
                "flags": flags,
            }),
        );
    }
    Ok(json!({ "rates": rates, "drives": results }))
}
