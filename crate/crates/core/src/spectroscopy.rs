//! Reflection spectroscopy of the emitter, including the Fano distortion
//! produced by a single impedance mismatch in the output line.
//!
//! Detunings are `f_probe − f01` in Hz. All rates are in Hz (angular/2π); the
//! line shape only involves ratios, so no 2π appears.

use std::io::{Read, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::TWO_PI;
use crate::error::{invalid, Error, Result};
use crate::optimize::{levenberg_marquardt, LmOptions};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Minimum number of samples accepted by [`fit_reflection`].
pub const MIN_TRACE_POINTS: usize = 50;
/// Minimum span of a trace, in units of the fitted Γ2.
pub const MIN_SPAN_LINEWIDTHS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTrace {
    pub probe_freqs: Vec<f64>,
    pub r_values: Vec<Complex64>,
    /// The probe was attenuated well below saturation (Ω < Γ1). Not checked.
    pub weak_probe: bool,
}

impl ReflectionTrace {
    pub fn new(probe_freqs: Vec<f64>, r_values: Vec<Complex64>) -> Result<Self> {
        if probe_freqs.len() != r_values.len() {
            return Err(Error::Format(format!(
                "{} frequencies but {} reflection values",
                probe_freqs.len(),
                r_values.len()
            )));
        }
        if probe_freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("probe_freqs", "must be strictly increasing"));
        }
        if r_values.iter().any(|r| !r.is_finite()) || probe_freqs.iter().any(|f| !f.is_finite()) {
            return Err(invalid("r_values", "must be finite"));
        }
        Ok(Self {
            probe_freqs,
            r_values,
            weak_probe: true,
        })
    }

    /// Noiseless trace from [`reflection_model`].
    pub fn from_model(probe_freqs: Vec<f64>, f01: f64, gamma_r: f64, gamma_2: f64, phi: f64) -> Result<Self> {
        let r = probe_freqs
            .iter()
            .map(|&f| reflection_model(f - f01, gamma_r, gamma_2, phi))
            .collect::<Result<Vec<_>>>()?;
        Self::new(probe_freqs, r)
    }

    pub fn len(&self) -> usize {
        self.probe_freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probe_freqs.is_empty()
    }

    pub fn span(&self) -> f64 {
        match (self.probe_freqs.first(), self.probe_freqs.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// True if every |r| stays below the passive-plus-emission bound
    /// 1 + Γr/Γ2 (plus `tol`).
    pub fn within_bound(&self, gamma_r: f64, gamma_2: f64, tol: f64) -> bool {
        let bound = 1.0 + gamma_r / gamma_2 + tol;
        self.r_values.iter().all(|r| r.norm() <= bound)
    }

    /// Apply [`compensate_mismatch`] to every sample.
    pub fn compensated(&self, phi: f64) -> Self {
        Self {
            probe_freqs: self.probe_freqs.clone(),
            r_values: self.r_values.iter().map(|&r| compensate_mismatch(r, phi)).collect(),
            weak_probe: self.weak_probe,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["f", "re", "im"])?;
        for (f, r) in self.probe_freqs.iter().zip(&self.r_values) {
            wtr.write_record([format!("{f:e}"), format!("{:e}", r.re), format!("{:e}", r.im)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Columns `f, re, im` with a header row.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let mut freqs = Vec::new();
        let mut vals = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(format!("expected 3 columns, got {}", rec.len())));
            }
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}"))))
                .collect::<Result<_>>()?;
            freqs.push(v[0]);
            vals.push(Complex64::new(v[1], v[2]));
        }
        Self::new(freqs, vals)
    }
}

/// r = 1 − iΓr·e^{iφ}/(Δ + iΓ2).
pub fn reflection_model(delta: f64, gamma_r: f64, gamma_2: f64, phi: f64) -> Result<Complex64> {
    if !(gamma_2 > 0.0) {
        return Err(invalid("gamma_2", "must be > 0"));
    }
    Ok(Complex64::new(1.0, 0.0) - I * gamma_r * Complex64::from_polar(1.0, phi) / Complex64::new(delta, gamma_2))
}

/// Undo the mismatch phase: r_comp = 1 − (1 − r_raw)·e^{−iφ}.
///
/// The sign is chosen so that compensating a trace generated by
/// [`reflection_model`] with phase φ returns the φ = 0 line shape.
pub fn compensate_mismatch(r_raw: Complex64, phi: f64) -> Complex64 {
    Complex64::new(1.0, 0.0) - (Complex64::new(1.0, 0.0) - r_raw) * Complex64::from_polar(1.0, -phi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectionFit {
    pub f01: f64,
    pub gamma_r: f64,
    pub gamma_2: f64,
    pub phi: f64,
    /// One-sigma errors in the order (f01, gamma_r, gamma_2, phi). Zero for a
    /// parameter held fixed.
    pub errors: [f64; 4],
    pub covariance: [[f64; 4]; 4],
    pub residual_norm: f64,
    pub converged: bool,
    pub weak_probe: bool,
}

/// Complex least-squares fit of [`reflection_model`] to a trace.
pub fn fit_reflection(trace: &ReflectionTrace) -> Result<ReflectionFit> {
    fit_impl(trace, None)
}

/// As [`fit_reflection`] with the Fano phase held at `phi`; used to refit a
/// compensated trace with φ = 0.
pub fn fit_reflection_fixed_phase(trace: &ReflectionTrace, phi: f64) -> Result<ReflectionFit> {
    fit_impl(trace, Some(phi))
}

/// Fit every trace of a flux sweep; each fit is independent.
pub fn fit_reflection_sweep(traces: &[ReflectionTrace]) -> Vec<Result<ReflectionFit>> {
    traces.par_iter().map(fit_reflection).collect()
}

fn fit_impl(trace: &ReflectionTrace, fixed_phi: Option<f64>) -> Result<ReflectionFit> {
    let n = trace.len();
    if n < MIN_TRACE_POINTS {
        return Err(Error::InsufficientData(format!(
            "{n} points, need at least {MIN_TRACE_POINTS}"
        )));
    }
    let f = &trace.probe_freqs;
    let r = &trace.r_values;
    let one = Complex64::new(1.0, 0.0);

    // resonance guess from the scattered part 1 − r
    let w: Vec<f64> = r.iter().map(|&x| (one - x).norm()).collect();
    let k0 = (0..n).max_by(|&a, &b| w[a].total_cmp(&w[b])).expect("non-empty");
    let peak = w[k0];
    let mut diffs: Vec<f64> = r.windows(2).map(|p| (p[1] - p[0]).norm()).collect();
    diffs.sort_by(f64::total_cmp);
    let noise = diffs[diffs.len() / 2] / 2f64.sqrt();
    if !(peak > 1e-9 && peak > 10.0 * noise) {
        return Err(Error::FitFailed(format!(
            "no resonance: peak |1 - r| = {peak:.3e}, noise {noise:.3e}"
        )));
    }
    let half = peak * peak / 2.0;
    let (mut lo, mut hi) = (k0, k0);
    while lo > 0 && w[lo - 1].powi(2) >= half {
        lo -= 1;
    }
    while hi + 1 < n && w[hi + 1].powi(2) >= half {
        hi += 1;
    }
    let spacing = trace.span() / (n - 1) as f64;
    let g2_0 = ((f[hi] - f[lo]) / 2.0).max(spacing / 2.0);
    if trace.span() < MIN_SPAN_LINEWIDTHS * g2_0 {
        return Err(Error::InsufficientData(format!(
            "trace spans {:.3e} Hz, need {MIN_SPAN_LINEWIDTHS} linewidths ({:.3e} Hz)",
            trace.span(),
            MIN_SPAN_LINEWIDTHS * g2_0
        )));
    }
    let gr_0 = peak * g2_0;
    let phi_0 = fixed_phi.unwrap_or_else(|| (one - r[k0]).arg());
    let f_ref = f[k0];

    let model = move |p: &[f64], fk: f64| -> Complex64 {
        let phi = fixed_phi.unwrap_or_else(|| p[3]);
        one - I * p[1] * Complex64::from_polar(1.0, phi) / Complex64::new(fk - f_ref - p[0], p[2])
    };
    let resid = |p: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * n);
        for k in 0..n {
            let d = model(p, f[k]) - r[k];
            out.push(d.re);
            out.push(d.im);
        }
        out
    };
    let free = if fixed_phi.is_some() { 3 } else { 4 };
    let p0 = [0.0, gr_0, g2_0, phi_0];
    let scales = [g2_0, gr_0, g2_0, 1.0];
    let fit = levenberg_marquardt(resid, &p0[..free], &scales[..free], LmOptions::default());
    let p = &fit.params;
    if !(p[2] > 0.0) {
        return Err(Error::FitFailed(format!("fitted gamma_2 = {:.3e} is not positive", p[2])));
    }
    let mut covariance = [[f64::NAN; 4]; 4];
    if let Some(c) = &fit.covariance {
        for i in 0..4 {
            for j in 0..4 {
                covariance[i][j] = if i < free && j < free { c[(i, j)] } else { 0.0 };
            }
        }
    }
    let errors = std::array::from_fn(|i| covariance[i][i].max(0.0).sqrt());
    let phi = match fixed_phi {
        Some(phi) => phi,
        None => wrap_pi(p[3]),
    };
    Ok(ReflectionFit {
        f01: f_ref + p[0],
        gamma_r: p[1],
        gamma_2: p[2],
        phi,
        errors,
        covariance,
        residual_norm: fit.residual_norm(),
        converged: fit.converged,
        weak_probe: trace.weak_probe,
    })
}

fn wrap_pi(x: f64) -> f64 {
    let y = (x + std::f64::consts::PI).rem_euclid(TWO_PI);
    y - std::f64::consts::PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchParams {
    pub r1: f64,
    /// The product t1²β².
    pub t1beta: f64,
    pub tau_delay: f64,
}

impl MismatchParams {
    pub fn new(r1: f64, t1beta: f64, tau_delay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&r1) {
            return Err(invalid("r1", "must satisfy 0 <= r1 < 1"));
        }
        if !(t1beta > 0.0) {
            return Err(invalid("t1beta", "must be > 0"));
        }
        Ok(Self { r1, t1beta, tau_delay })
    }

    /// t1 = √(1 − r1²) and a line attenuation β.
    pub fn lossless_mismatch(r1: f64, beta: f64, tau_delay: f64) -> Result<Self> {
        Self::new(r1, (1.0 - r1 * r1) * beta * beta, tau_delay)
    }

    /// β implied by t1 = √(1 − r1²).
    pub fn beta(&self) -> f64 {
        (self.t1beta / (1.0 - self.r1 * self.r1)).sqrt()
    }
}

/// tan φ = r1·sin 2φ0 / (t1²β² + r1·cos 2φ0) with φ0 = 2π f τ.
pub fn phase_model(f: f64, mm: &MismatchParams) -> f64 {
    let x = 2.0 * TWO_PI * f * mm.tau_delay;
    (mm.r1 * x.sin()).atan2(mm.t1beta + mm.r1 * x.cos())
}

/// The phase curve only determines r1/(t1²β²) and τ. One more relation is
/// needed to separate r1 from t1²β².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PhaseConstraint {
    /// Known attenuation β, with t1 = √(1 − r1²).
    Beta(f64),
    /// Known t1²β².
    T1Beta(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseFitOptions {
    /// Upper end of the delay grid searched before refinement.
    pub tau_max: f64,
}

impl Default for PhaseFitOptions {
    fn default() -> Self {
        Self { tau_max: 20e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseFit {
    pub params: MismatchParams,
    pub r1_err: f64,
    pub tau_err: f64,
    /// Fitted r1/(t1²β²) and its error.
    pub ratio: f64,
    pub ratio_err: f64,
    pub residual_norm: f64,
    pub converged: bool,
    /// Too few points, too short a span, or a singular fit. With r1 = 0 the
    /// delay is meaningless and this is set.
    pub underdetermined: bool,
}

pub fn fit_phase_curve(points: &[(f64, f64)], constraint: PhaseConstraint) -> Result<PhaseFit> {
    fit_phase_curve_with(points, constraint, PhaseFitOptions::default())
}

pub fn fit_phase_curve_with(
    points: &[(f64, f64)],
    constraint: PhaseConstraint,
    opts: PhaseFitOptions,
) -> Result<PhaseFit> {
    match constraint {
        PhaseConstraint::Beta(b) if !(b > 0.0) => return Err(invalid("beta", "must be > 0")),
        PhaseConstraint::T1Beta(c) if !(c > 0.0) => return Err(invalid("t1beta", "must be > 0")),
        _ => {}
    }
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} phase points")));
    }
    let fixed = |r1: f64| -> Result<MismatchParams> {
        match constraint {
            PhaseConstraint::Beta(b) => MismatchParams::lossless_mismatch(r1, b, 0.0),
            PhaseConstraint::T1Beta(c) => MismatchParams::new(r1, c, 0.0),
        }
    };
    let f_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let f_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);

    if points.iter().all(|p| p.1.abs() < 1e-15) {
        return Ok(PhaseFit {
            params: fixed(0.0)?,
            r1_err: 0.0,
            tau_err: f64::NAN,
            ratio: 0.0,
            ratio_err: 0.0,
            residual_norm: 0.0,
            converged: true,
            underdetermined: true,
        });
    }

    // φ depends only on k = r1/t1beta and τ
    let model = |k: f64, tau: f64, f: f64| {
        let x = 2.0 * TWO_PI * f * tau;
        (k * x.sin()).atan2(1.0 + k * x.cos())
    };
    let step = 0.1 / (2.0 * TWO_PI * f_max.abs().max(1.0));
    let count = ((opts.tau_max / step).ceil() as usize).clamp(16, 2_000_000);
    let (k0, tau0) = (0..=count)
        .into_par_iter()
        .map(|j| {
            let tau = opts.tau_max * j as f64 / count as f64;
            let (mut sp, mut ss) = (0.0, 0.0);
            for &(f, phi) in points {
                let s = (2.0 * TWO_PI * f * tau).sin();
                sp += s * phi;
                ss += s * s;
            }
            let k = if ss > 0.0 { sp / ss } else { 0.0 };
            let cost: f64 = points.iter().map(|&(f, phi)| (model(k, tau, f) - phi).powi(2)).sum();
            (cost, j, k, tau)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, _, k, tau)| (k, tau))
        .expect("non-empty grid");

    let resid = |p: &[f64]| points.iter().map(|&(f, phi)| model(p[0], p[1], f) - phi).collect::<Vec<_>>();
    let fit = levenberg_marquardt(
        resid,
        &[k0, tau0],
        &[k0.abs().max(1e-3), step],
        LmOptions::default(),
    );
    let (k, tau) = (fit.params[0], fit.params[1]);
    if k < 0.0 {
        return Err(Error::FitFailed(format!("negative mismatch ratio {k:.3e}")));
    }
    let (r1, dr1_dk) = match constraint {
        PhaseConstraint::Beta(b) => {
            let kb = k * b * b;
            let r1 = 2.0 * kb / (1.0 + (1.0 + 4.0 * kb * kb).sqrt());
            (r1, b * b * (1.0 - r1 * r1) / (1.0 + 2.0 * kb * r1))
        }
        PhaseConstraint::T1Beta(c) => (k * c, c),
    };
    let mut params = fixed(r1)?;
    params.tau_delay = tau;
    let se = fit.std_errors();
    let (ratio_err, tau_err) = match &se {
        Some(v) => (v[0], v[1]),
        None => (f64::NAN, f64::NAN),
    };
    let quarter = 4.0 * TWO_PI * (f_max - f_min) * tau.abs() >= std::f64::consts::FRAC_PI_2;
    Ok(PhaseFit {
        params,
        r1_err: ratio_err * dr1_dk,
        tau_err,
        ratio: k,
        ratio_err,
        residual_norm: fit.residual_norm(),
        converged: fit.converged,
        underdetermined: n < 5 || !quarter || se.is_none(),
    })
}
