//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every line is printed on every run.
//! The process exits non-zero if any hard criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64 as C;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use photonsource::device::{efficiency_sweep, DeviceParams, GammaNModel, RateSet, TWO_PI};
use photonsource::dynamics::{
    fit_rabi_oscillation, rabi_analytic, simulate_bloch, simulate_three_level, BlochState, QubitModel, RabiParams,
};
use photonsource::measurement::{extract_field_moments, filtered_mode_state, synthesize_mode_shots, MeasurementConfig, MomentSet};
use photonsource::pulses::{
    apply_cancellation, calibrate_cancellation, default_sigma, emitted_field, field_from_rabi, field_to_voltage,
    gaussian_pulse, ideal_emission_photons, photon_number, suppression_db, CancellationSetting, ComplexEnvelope,
};
use photonsource::spectroscopy::{
    compensate_mismatch, fit_phase_curve, fit_reflection, fit_reflection_fixed_phase, phase_model, MismatchParams,
    PhaseConstraint, ReflectionTrace,
};
use photonsource::stability::{generate_stability_dataset, simulate_telegraph, StabilityConfig, TelegraphTLS};
use photonsource::tomography::{g2_zero, mle_density_matrix, wigner, DensityMatrix};

const DT: f64 = 0.1e-9;
const PULSE: f64 = 50e-9;
const ANHARM: f64 = 251e6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(cond: bool, detail: String) -> Outcome {
    Outcome { pass: cond, detail }
}

fn merge(parts: Vec<Outcome>) -> Outcome {
    Outcome {
        pass: parts.iter().all(|p| p.pass),
        detail: parts
            .iter()
            .map(|p| format!("[{}] {}", if p.pass { "ok" } else { "miss" }, p.detail))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

/// Pulse end state of the three-level model: (ρ11, ⟨σ−⟩).
fn pulse_end(area: f64, rates: &RateSet) -> (f64, C) {
    let p = gaussian_pulse(PULSE, default_sigma(PULSE), area, 0.0, DT, rates.gamma_r).unwrap();
    let tr = simulate_three_level(&p, 0.0, ANHARM, rates, DT).unwrap();
    (tr.final_populations()[1], tr.final_coherence())
}

fn mode_moments(area: f64, seed: u64) -> MomentSet {
    let rates = RateSet::table1();
    let (rho11, sm) = pulse_end(area, &rates);
    let state = filtered_mode_state(rho11, sm, &rates).unwrap();
    let cfg = MeasurementConfig {
        n_shots: 1_000_000,
        noise_photons: 2.0,
        seed,
        ..MeasurementConfig::default()
    };
    let shots = synthesize_mode_shots(&state, &cfg, rates.gamma_1).unwrap();
    extract_field_moments(&shots, 4).unwrap()
}

fn c1_emission_energy() -> Outcome {
    let rates = RateSet::table1();
    let drive = ComplexEnvelope::zeros(12_001, 1e-9).unwrap();
    let start = BlochState::new(C::new(0.0, -0.5), 0.0).unwrap();
    let tr = QubitModel::new(&rates).bloch(start, &drive, 0.0, 1e-9).unwrap();
    let em = emitted_field(&tr, rates.gamma_r).unwrap();
    let f = 5.51e9;
    let v = field_to_voltage(&em, f, 50.0);
    let n = photon_number(&v, C::new(0.0, 0.0), f, 50.0, (0.0, v.duration())).unwrap();
    let target = ideal_emission_photons(&rates);
    let rel = (n / target - 1.0).abs();
    check(
        rel < 0.005 && (target - 0.1795).abs() < 0.0005,
        format!("n = {n:.5}, Γr/(8Γ2) = {target:.5}, deviation {:.3}%", 100.0 * rel),
    )
}

fn c2_pulse_fidelity() -> Outcome {
    let rates = RateSet::table1();
    let (rho11, _) = pulse_end(PI, &rates);
    let (_, sm) = pulse_end(PI / 2.0, &rates);
    merge(vec![
        check((rho11 - 0.93).abs() <= 0.02, format!("π: ρ11 = {rho11:.4} (0.93 ± 0.02)")),
        check(
            (sm.norm() - 0.44).abs() <= 0.02,
            format!("π/2: |⟨σ−⟩| = {:.4} (0.44 ± 0.02)", sm.norm()),
        ),
    ])
}

fn c3_mode_moments() -> Outcome {
    let pi = mode_moments(PI, 31);
    let half = mode_moments(PI / 2.0, 32);
    let n = pi.photon_number();
    let a = half.mean_field().norm();
    merge(vec![
        check(
            (n - 0.67).abs() <= 0.02,
            format!("π: ⟨a†a⟩ = {n:.4} ± {:.4} (0.67 ± 0.02)", pi.sigma[1][1]),
        ),
        check(
            (a - 0.36).abs() <= 0.02,
            format!("π/2: |⟨a⟩| = {a:.4} ± {:.4} (0.36 ± 0.02)", half.sigma[0][1]),
        ),
    ])
}

fn c4_antibunching() -> Outcome {
    let m = mode_moments(PI, 41);
    match g2_zero(&m) {
        Ok(g) => check(
            g.value.abs() <= 2.0 * g.sigma && g.sigma < 0.06,
            format!("g2(0) = {:.4} ± {:.4} at 1e6 shots", g.value, g.sigma),
        ),
        Err(e) => check(false, format!("g2 undefined: {e}")),
    }
}

fn c5_wigner() -> Outcome {
    let m = mode_moments(PI, 51);
    let mle = mle_density_matrix(&m).unwrap();
    let w_mle = wigner(&mle.rho, C::new(0.0, 0.0)).unwrap().value;
    let w_fock = wigner(&DensityMatrix::fock(1, 3), C::new(0.0, 0.0)).unwrap().value;
    merge(vec![
        check(w_mle < -0.1, format!("MLE π state W(0) = {w_mle:.4} (< −0.1)")),
        check(
            (w_fock + 2.0 / PI).abs() < 1e-9,
            format!("|1⟩ W(0) + 2/π = {:.1e}", w_fock + 2.0 / PI),
        ),
    ])
}

fn c6_rabi() -> Outcome {
    let rates = RateSet::table1();
    let omega = 5e6;
    let dt = 0.5e-9;
    let a = field_from_rabi(C::new(TWO_PI * omega, 0.0), rates.gamma_r);
    let drive = ComplexEnvelope::constant(a, 10_001, dt).unwrap();
    let tr = simulate_bloch(&drive, 0.0, &rates, dt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut noise = |s: f64| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let (mut taus, mut i_sig, mut p_sig) = (Vec::new(), Vec::new(), Vec::new());
    for k in (0..tr.len()).step_by(10) {
        taus.push(tr.times[k]);
        i_sig.push(0.8 * tr.bloch[k][1] + 0.02 + noise(0.005));
        p_sig.push(1.2 * (1.0 + tr.bloch[k][2]) - 0.01 + noise(0.005));
    }
    let rp = RabiParams::new(omega, &rates).unwrap();
    let fit = fit_rabi_oscillation(&taus, &i_sig, &p_sig, rp.omega_m * 0.98).unwrap();
    let target = (rates.gamma_1 + rates.gamma_2) / 2.0;
    let sum = fit.theta_sum() / PI;
    merge(vec![
        check(
            (0.49..=0.51).contains(&sum),
            format!("(θ1+θ2)/π = {sum:.4} (closed form {:.4})", rp.theta_sum() / PI),
        ),
        check(
            (fit.gamma_s / target - 1.0).abs() <= 0.03,
            format!("Γs = {:.1} ± {:.1} kHz vs (Γ1+Γ2)/2 = {:.1} kHz", fit.gamma_s / 1e3, fit.gamma_s_err / 1e3, target / 1e3),
        ),
    ])
}

fn c7_cancellation() -> Outcome {
    let p = gaussian_pulse(PULSE, default_sigma(PULSE), PI, 0.0, DT, 270e3).unwrap();
    let exact = apply_cancellation(&p, &p, &CancellationSetting::ideal()).unwrap();
    let exact_db = suppression_db(p.energy(), exact.energy());
    let init = CancellationSetting {
        amp_scale: 0.9,
        phase: PI + 0.1,
        delay: 2e-9,
    };
    let fit = calibrate_cancellation(&p, &p, &init).unwrap();
    let amp = CancellationSetting {
        amp_scale: 1.021,
        ..CancellationSetting::ideal()
    };
    let amp_db = suppression_db(p.energy(), apply_cancellation(&p, &p, &amp).unwrap().energy());
    merge(vec![
        check(exact_db > 200.0, format!("exact negative: residual −{exact_db:.0} dB")),
        check(
            fit.suppression_db() >= 60.0 && fit.iterations <= 500,
            format!("calibrated: −{:.1} dB after {} iterations", fit.suppression_db(), fit.iterations),
        ),
        check((amp_db - 33.5).abs() <= 0.1, format!("2.1% amplitude error: {amp_db:.2} dB")),
    ])
}

fn c8_efficiency() -> Outcome {
    let params = DeviceParams::table1();
    let mut freqs = vec![params.f01_max];
    freqs.extend((0..=60).map(|i| 5.5e9 - i as f64 * 10e6));
    let (pts, _) = efficiency_sweep(&freqs, &params, &GammaNModel::default()).unwrap();
    let worst = pts.iter().map(|p| (p.budget.total() - 1.0).abs()).fold(0.0, f64::max);
    let sweet = pts[0].budget.eta_q;
    let best = pts.iter().map(|p| p.budget.eta_q).fold(0.0, f64::max);
    let out = merge(vec![
        check(worst <= 1e-12, format!("max |η_q+η_p+η_n − 1| = {worst:.1e}")),
        check((sweet - 0.718).abs() < 5e-4, format!("sweet-spot η_q = {sweet:.4}")),
    ]);
    Outcome {
        detail: format!(
            "{}; [info] max detuned η_q = {best:.3} ({} the ≥ 0.9 envelope)",
            out.detail,
            if best >= 0.9 { "meets" } else { "below" }
        ),
        ..out
    }
}

fn c9_fano() -> Outcome {
    let (f01, gr, g2, phi) = (5.51e9, 270e3, 188e3, 0.3);
    let freqs: Vec<f64> = (0..201).map(|k| f01 - 3e6 + 30e3 * k as f64).collect();
    let clean = ReflectionTrace::from_model(freqs, f01, gr, g2, phi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut noisy = clean.clone();
    for r in &mut noisy.r_values {
        let (x, y): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        *r += C::new(x, y) * (0.01 / 2f64.sqrt());
    }
    let raw = fit_reflection(&noisy).unwrap();
    let comp = fit_reflection_fixed_phase(&noisy.compensated(raw.phi), 0.0).unwrap();
    let exact = (0..clean.len())
        .map(|k| (compensate_mismatch(clean.r_values[k], phi) - ReflectionTrace::from_model(vec![clean.probe_freqs[k]], f01, gr, g2, 0.0).unwrap().r_values[0]).norm())
        .fold(0.0, f64::max);

    let mm = MismatchParams::lossless_mismatch(0.14, 0.97, 2e-9).unwrap();
    let pts: Vec<(f64, f64)> = (0..25)
        .map(|k| {
            let f = 4.9e9 + 25e6 * k as f64;
            (f, phase_model(f, &mm) + 0.01 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        })
        .collect();
    let pf = fit_phase_curve(&pts, PhaseConstraint::Beta(0.97)).unwrap();
    merge(vec![
        check(exact < 1e-12, format!("compensation inverse error {exact:.1e}")),
        check(
            (comp.gamma_r - gr).abs() <= 2.0 * comp.errors[1] && (comp.gamma_2 - g2).abs() <= 2.0 * comp.errors[2],
            format!(
                "compensated Γr = {:.2} ± {:.2} kHz, Γ2 = {:.2} ± {:.2} kHz (fitted φ = {:.4})",
                comp.gamma_r / 1e3,
                comp.errors[1] / 1e3,
                comp.gamma_2 / 1e3,
                comp.errors[2] / 1e3,
                raw.phi
            ),
        ),
        check(
            (pf.params.r1 - 0.14).abs() <= 0.01,
            format!("phase curve r1 = {:.4} ± {:.4}", pf.params.r1, pf.r1_err),
        ),
    ])
}

fn c10_stability() -> Outcome {
    let mut tl = generate_stability_dataset(&StabilityConfig::reference_device(), &DeviceParams::table1()).unwrap();
    tl.analyze();
    let (hit, total) = tl.coverage(2.0);
    let failed = tl.slots.iter().filter(|s| s.estimate.is_none()).count();
    let frac = hit as f64 / total as f64;
    let mut parts = vec![check(
        frac >= 0.95 && failed == 0,
        format!("{hit}/{total} = {:.1}% of slot estimates within 2σ ({failed} failed fits)", 100.0 * frac),
    )];
    for (gamma, seed) in [(34.7e-6, 101), (127.9e-6, 102)] {
        let tls = TelegraphTLS::new(gamma, 40e3).unwrap();
        let s = simulate_telegraph(5000.0 / gamma, &tls, 1.0 / gamma, seed).unwrap();
        let (on, off) = s.dwell_times();
        let n = (on.len() + off.len()) as f64;
        let mean = (on.iter().sum::<f64>() + off.iter().sum::<f64>()) / n;
        parts.push(check(
            (mean * gamma - 1.0).abs() <= 0.05,
            format!("γ = {:.1} μHz: mean dwell {mean:.4e} s vs {:.4e} s", gamma * 1e6, 1.0 / gamma),
        ));
    }
    merge(parts)
}

fn c11_cross_oracle() -> Outcome {
    let rates = RateSet::table1();
    let dt = 0.25e-9;
    let parts = [1e6, 5e6, 10e6]
        .iter()
        .map(|&omega| {
            let rp = RabiParams::new(omega, &rates).unwrap();
            let a = field_from_rabi(C::new(TWO_PI * omega, 0.0), rates.gamma_r);
            let drive = ComplexEnvelope::constant(a, 24_001, dt).unwrap();
            let tr = simulate_bloch(&drive, 0.0, &rates, dt).unwrap();
            let worst = (0..tr.len())
                .map(|k| {
                    let (sy, sz) = rabi_analytic(tr.times[k], &rp, &rates).unwrap();
                    (tr.bloch[k][1] - sy).abs().max((tr.bloch[k][2] - sz).abs())
                })
                .fold(0.0, f64::max);
            check(worst < 1e-3, format!("Ω = {:.0} MHz: max deviation {worst:.1e}", omega / 1e6))
        })
        .collect();
    merge(parts)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("emission energy identity", c1_emission_energy),
        ("pulse fidelity", c2_pulse_fidelity),
        ("filtered-mode moments", c3_mode_moments),
        ("antibunching", c4_antibunching),
        ("Wigner negativity", c5_wigner),
        ("Rabi phase relation", c6_rabi),
        ("cancellation", c7_cancellation),
        ("efficiency budget", c8_efficiency),
        ("Fano round trip", c9_fano),
        ("stability estimator calibration", c10_stability),
        ("cross-oracle dynamics", c11_cross_oracle),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        if !out.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {verdict} {name} ({:.1} s): {}",
            i + 1,
            t0.elapsed().as_secs_f64(),
            out.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
