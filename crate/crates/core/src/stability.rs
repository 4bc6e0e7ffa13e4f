//! Slow noise over hours of operation: telegraph two-level fluctuators, 1/f
//! flux noise and discrete flux-offset jumps, plus the estimators that turn
//! emission decay records back into Γ1, Γ2, Γφ and a frequency offset.
//!
//! Switching rates γ are plain event rates (s⁻¹): the mean dwell time in
//! either state is 1/γ. Qubit rates, shifts and couplings are in Hz.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{
    flux_to_frequency, rates_at_flux, self_consistent_dephasing_time, DeviceParams, GammaNModel, RateSet, TWO_PI,
};
use crate::error::{invalid, Error, Result};
use crate::optimize::{levenberg_marquardt, LmOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelegraphTLS {
    /// Switching rate out of either state, s⁻¹.
    pub gamma_switch: f64,
    /// Dispersive shift of the qubit while the fluctuator is in its active
    /// state, Hz.
    pub chi: f64,
    /// Coupling g, Hz. Optional; only used for the relaxation estimate.
    #[serde(default)]
    pub g: Option<f64>,
    /// Fluctuator–qubit detuning Δ, Hz. Optional.
    #[serde(default)]
    pub delta_tls: Option<f64>,
    /// Initial state; `true` is active.
    #[serde(default)]
    pub state: bool,
    /// Extra pure dephasing of the qubit while active, Hz.
    #[serde(default)]
    pub dephasing_active: f64,
    /// Index of the interleaved flux point this fluctuator couples to.
    #[serde(default)]
    pub flux_point: usize,
}

impl TelegraphTLS {
    pub fn new(gamma_switch: f64, chi: f64) -> Result<Self> {
        let t = Self {
            gamma_switch,
            chi,
            g: None,
            delta_tls: None,
            state: false,
            dephasing_active: 0.0,
            flux_point: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_coupling(mut self, g: f64, delta_tls: f64) -> Result<Self> {
        self.g = Some(g);
        self.delta_tls = Some(delta_tls);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_switch >= 0.0 && self.gamma_switch.is_finite()) {
            return Err(invalid("gamma_switch", "must be finite and >= 0"));
        }
        if !self.chi.is_finite() {
            return Err(invalid("chi", "must be finite"));
        }
        if !(self.dephasing_active >= 0.0 && self.dephasing_active.is_finite()) {
            return Err(invalid("dephasing_active", "must be finite and >= 0"));
        }
        if let (Some(g), Some(d)) = (self.g, self.delta_tls) {
            let g2 = g * g;
            if (self.chi * d - g2).abs() > 1e-6 * g2.max(f64::MIN_POSITIVE) {
                return Err(invalid(
                    "chi",
                    format!("chi*delta = {:.6e} but g^2 = {g2:.6e}", self.chi * d),
                ));
            }
        }
        Ok(())
    }
}

/// Two-state switching history. `states[k]` is the state at `k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TelegraphSeries {
    pub dt: f64,
    pub duration: f64,
    pub initial: bool,
    pub states: Vec<bool>,
    /// Exact switching instants.
    pub switch_times: Vec<f64>,
}

impl TelegraphSeries {
    pub fn state_at(&self, t: f64) -> bool {
        let n = self.switch_times.partition_point(|&s| s <= t);
        self.initial ^ (n % 2 == 1)
    }

    /// Time-weighted fraction of `[t0, t1]` spent active.
    pub fn active_fraction(&self, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return self.state_at(t0) as u8 as f64;
        }
        let start = self.switch_times.partition_point(|&s| s <= t0);
        let mut state = self.state_at(t0);
        let mut last = t0;
        let mut active = 0.0;
        for &s in &self.switch_times[start..] {
            if s >= t1 {
                break;
            }
            if state {
                active += s - last;
            }
            state = !state;
            last = s;
        }
        if state {
            active += t1 - last;
        }
        active / (t1 - t0)
    }

    pub fn switches_in(&self, t0: f64, t1: f64) -> usize {
        self.switch_times.partition_point(|&s| s < t1) - self.switch_times.partition_point(|&s| s < t0)
    }

    /// Completed dwell intervals, (active, inactive). The censored first and
    /// last intervals are dropped.
    pub fn dwell_times(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut on, mut off) = (Vec::new(), Vec::new());
        let mut state = !self.initial;
        for w in self.switch_times.windows(2) {
            if state {
                on.push(w[1] - w[0]);
            } else {
                off.push(w[1] - w[0]);
            }
            state = !state;
        }
        (on, off)
    }
}

fn switch_times(duration: f64, gamma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if gamma <= 0.0 {
        return Vec::new();
    }
    let exp = Exp::new(gamma).expect("gamma > 0");
    let mut out = Vec::new();
    let mut t = exp.sample(rng);
    while t < duration {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

/// Continuous-time symmetric two-state Markov chain with exponential dwell
/// times, sampled on a `dt` grid over `[0, duration]`.
pub fn simulate_telegraph(duration: f64, tls: &TelegraphTLS, dt: f64, seed: u64) -> Result<TelegraphSeries> {
    tls.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", "must be > 0"));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(invalid("duration", "must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = switch_times(duration, tls.gamma_switch, &mut rng);
    let n = (duration / dt).floor() as usize + 1;
    let mut states = Vec::with_capacity(n);
    let mut idx = 0;
    let mut state = tls.state;
    for k in 0..n {
        let t = k as f64 * dt;
        while idx < times.len() && times[idx] <= t {
            state = !state;
            idx += 1;
        }
        states.push(state);
    }
    Ok(TelegraphSeries {
        dt,
        duration,
        initial: tls.state,
        states,
        switch_times: times,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TlsRelaxation {
    pub rate: f64,
    /// False when g > Δ/5 and the dispersive estimate is not trustworthy.
    pub dispersive: bool,
}

/// Relaxation handed to the qubit by a detuned fluctuator: (g/Δ)²·γ.
pub fn tls_relaxation_contribution(tls: &TelegraphTLS) -> Result<TlsRelaxation> {
    let (Some(g), Some(d)) = (tls.g, tls.delta_tls) else {
        return Err(invalid("g", "coupling and detuning are both required"));
    };
    if d == 0.0 {
        return Err(Error::Domain("delta_tls must be non-zero".into()));
    }
    Ok(TlsRelaxation {
        rate: (g / d).powi(2) * tls.gamma_switch,
        dispersive: g.abs() <= d.abs() / 5.0,
    })
}

/// Dephasing added to a slot in which a fluctuator switches:
/// 2(2πχ)²/γ converted to Hz, capped at `cap`.
pub fn telegraph_dephasing(tls: &TelegraphTLS, cap: f64) -> f64 {
    if tls.gamma_switch <= 0.0 {
        return cap;
    }
    (2.0 * TWO_PI * tls.chi * tls.chi / tls.gamma_switch).min(cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpAmplitude {
    Fixed { value: f64 },
    Gaussian { std: f64 },
}

/// Poisson-arriving steps of the flux offset, shared by both bias points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxJumpModel {
    /// Mean arrival rate, s⁻¹.
    pub rate: f64,
    /// Step size in Φ0.
    pub amplitude: JumpAmplitude,
}

impl FluxJumpModel {
    pub fn none() -> Self {
        Self {
            rate: 0.0,
            amplitude: JumpAmplitude::Fixed { value: 0.0 },
        }
    }
}

impl Default for FluxJumpModel {
    /// About two jumps in 136 h, each shifting the detuned point by ~100 kHz.
    fn default() -> Self {
        Self {
            rate: 2.0 / (136.0 * 3600.0),
            amplitude: JumpAmplitude::Gaussian { std: 5e-5 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayRecordConfig {
    pub n_points: usize,
    pub t_max: f64,
    /// Noise per point relative to the initial power.
    pub power_noise: f64,
    /// Complex noise per point relative to the initial quadrature amplitude.
    pub quadrature_noise: f64,
}

impl Default for DecayRecordConfig {
    fn default() -> Self {
        Self {
            n_points: 200,
            t_max: 6e-6,
            power_noise: 0.01,
            quadrature_noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub duration: f64,
    pub slots: usize,
    pub flux_points: [f64; 2],
    pub tls: Vec<TelegraphTLS>,
    pub flux_jumps: FluxJumpModel,
    pub gamma_n_model: GammaNModel,
    /// Include 1/f flux dephasing.
    pub flux_noise: bool,
    /// Cap on the switching-slot dephasing, Hz. `None` uses |χ|.
    pub telegraph_cap: Option<f64>,
    pub record: DecayRecordConfig,
    /// Set to false to generate ground truth only.
    pub emit_records: bool,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            duration: 136.0 * 3600.0,
            slots: 200,
            flux_points: [0.0, 0.09],
            tls: Vec::new(),
            flux_jumps: FluxJumpModel::none(),
            gamma_n_model: GammaNModel::default(),
            flux_noise: true,
            telegraph_cap: None,
            record: DecayRecordConfig::default(),
            emit_records: true,
            seed: 1,
        }
    }
}

impl StabilityConfig {
    /// One fluctuator per bias point with the switching rates observed on the
    /// reference device, plus flux jumps.
    pub fn reference_device() -> Self {
        let sweet = TelegraphTLS {
            dephasing_active: 125e3,
            flux_point: 0,
            ..TelegraphTLS::new(34.7e-6, 40e3).expect("valid")
        };
        let detuned = TelegraphTLS {
            dephasing_active: 180e3,
            flux_point: 1,
            ..TelegraphTLS::new(127.9e-6, 40e3).expect("valid")
        };
        Self {
            tls: vec![sweet, detuned],
            flux_jumps: FluxJumpModel::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration", "must be > 0"));
        }
        if self.slots == 0 || self.slots % 2 != 0 {
            return Err(invalid("slots", "must be even and > 0"));
        }
        for t in &self.tls {
            t.validate()?;
            if t.flux_point > 1 {
                return Err(invalid("flux_point", "must be 0 or 1"));
            }
        }
        if !(self.flux_jumps.rate >= 0.0) {
            return Err(invalid("flux_jumps.rate", "must be >= 0"));
        }
        if self.emit_records && self.record.n_points < 8 {
            return Err(invalid("record.n_points", "need at least 8 points"));
        }
        if !(self.record.t_max > 0.0) {
            return Err(invalid("record.t_max", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotTruth {
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub gamma_phi: f64,
    /// Qubit frequency minus its nominal value at this bias point, Hz.
    pub freq_offset: f64,
    pub eta_p: f64,
    pub flux_offset: f64,
    /// Active fraction of every fluctuator during the slot.
    pub tls_active: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureTrace {
    pub times: Vec<f64>,
    /// ⟨a⟩ in the frame of the drive.
    pub values: Vec<Complex64>,
}

impl PowerTrace {
    pub fn exponential(times: Vec<f64>, amplitude: f64, gamma_1: f64) -> Self {
        let values = times.iter().map(|&t| amplitude * (-TWO_PI * gamma_1 * t).exp()).collect();
        Self { times, values }
    }
}

impl QuadratureTrace {
    /// A·exp((−2πΓ2 + 2πi·δ)t) with δ = f_drive − f01.
    pub fn exponential(times: Vec<f64>, amplitude: Complex64, gamma_2: f64, detuning: f64) -> Self {
        let values = times
            .iter()
            .map(|&t| amplitude * Complex64::new(-TWO_PI * gamma_2 * t, TWO_PI * detuning * t).exp())
            .collect();
        Self { times, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRecord {
    pub power: PowerTrace,
    pub quadrature: QuadratureTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotEstimate {
    pub rates: RateEstimate,
    pub freq_offset: f64,
    pub freq_offset_err: f64,
    pub eta_p: f64,
    pub eta_p_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub index: usize,
    /// Centre of the slot, s.
    pub wall_time: f64,
    pub flux_point_id: usize,
    pub flux: f64,
    pub truth: SlotTruth,
    #[serde(skip)]
    pub record: Option<DecayRecord>,
    pub estimate: Option<SlotEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityTimeline {
    pub slots: Vec<SlotRecord>,
    /// 1/f integration time used for the flux-noise dephasing, s.
    pub t_phase: f64,
    pub nominal_freqs: [f64; 2],
}

/// Synthesize a timeline of interleaved slots alternating between the two
/// flux points. Noise histories are drawn first, sequentially per source;
/// the per-slot decay records are then drawn in parallel from independent
/// streams, so the result depends only on the seed.
pub fn generate_stability_dataset(config: &StabilityConfig, params: &DeviceParams) -> Result<StabilityTimeline> {
    config.validate()?;
    params.validate()?;
    let t_phase = self_consistent_dephasing_time(&config.flux_points, params)?.t;
    let nominal = [
        flux_to_frequency(config.flux_points[0], params)?,
        flux_to_frequency(config.flux_points[1], params)?,
    ];

    let histories: Vec<TelegraphSeries> = config
        .tls
        .iter()
        .enumerate()
        .map(|(i, tls)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1 << 32 | i as u64);
            TelegraphSeries {
                dt: config.duration,
                duration: config.duration,
                initial: tls.state,
                states: vec![tls.state],
                switch_times: switch_times(config.duration, tls.gamma_switch, &mut rng),
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 << 33);
    let jumps = flux_jumps(config.duration, &config.flux_jumps, &mut rng)?;
    let offset_at = |t: f64| -> f64 { jumps.iter().take_while(|j| j.0 <= t).map(|j| j.1).sum() };

    let slot_len = config.duration / config.slots as f64;
    let slots = (0..config.slots)
        .into_par_iter()
        .map(|s| {
            let id = s % 2;
            let (t0, t1) = (s as f64 * slot_len, (s + 1) as f64 * slot_len);
            let wall_time = 0.5 * (t0 + t1);
            let flux_offset = offset_at(wall_time);
            let phi = config.flux_points[id] + flux_offset;
            let base = if config.flux_noise {
                rates_at_flux(phi, t_phase, params, &config.gamma_n_model)?
            } else {
                RateSet::new(params.gamma_r, config.gamma_n_model_at(phi, params)?, 0.0)?
            };
            let mut freq_offset = flux_to_frequency(phi, params)? - nominal[id];
            let mut gamma_phi = base.gamma_phi;
            let mut gamma_1 = base.gamma_1;
            let mut tls_active = Vec::with_capacity(config.tls.len());
            for (tls, hist) in config.tls.iter().zip(&histories) {
                let frac = hist.active_fraction(t0, t1);
                tls_active.push(frac);
                if tls.flux_point != id {
                    continue;
                }
                freq_offset += tls.chi * frac;
                gamma_phi += tls.dephasing_active * frac;
                if hist.switches_in(t0, t1) > 0 {
                    gamma_phi += telegraph_dephasing(tls, config.telegraph_cap.unwrap_or(tls.chi.abs()));
                }
                if let Ok(relax) = tls_relaxation_contribution(tls) {
                    gamma_1 += relax.rate;
                }
            }
            let gamma_2 = gamma_1 / 2.0 + gamma_phi;
            let truth = SlotTruth {
                gamma_1,
                gamma_2,
                gamma_phi,
                freq_offset,
                eta_p: gamma_phi / gamma_2,
                flux_offset,
                tls_active,
            };
            let record = config.emit_records.then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(s as u64);
                synth_record(&config.record, &truth, &mut rng)
            });
            Ok(SlotRecord {
                index: s,
                wall_time,
                flux_point_id: id,
                flux: config.flux_points[id],
                truth,
                record,
                estimate: None,
                error: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityTimeline {
        slots,
        t_phase,
        nominal_freqs: nominal,
    })
}

impl StabilityConfig {
    fn gamma_n_model_at(&self, phi: f64, params: &DeviceParams) -> Result<f64> {
        use crate::device::NonRadiativeModel;
        self.gamma_n_model.gamma_n(phi, params)
    }
}

fn flux_jumps(duration: f64, model: &FluxJumpModel, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    if model.rate <= 0.0 {
        return Ok(Vec::new());
    }
    let mean = model.rate * duration;
    let n = Poisson::new(mean).map_err(|e| invalid("flux_jumps.rate", e.to_string()))?.sample(rng) as usize;
    let mut jumps: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let t = rng.random::<f64>() * duration;
            let a = match model.amplitude {
                JumpAmplitude::Fixed { value } => value,
                JumpAmplitude::Gaussian { std } => std * Distribution::<f64>::sample(&StandardNormal, rng),
            };
            (t, a)
        })
        .collect();
    jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(jumps)
}

fn synth_record(cfg: &DecayRecordConfig, truth: &SlotTruth, rng: &mut ChaCha8Rng) -> DecayRecord {
    let n = cfg.n_points;
    let times: Vec<f64> = (0..n).map(|k| cfg.t_max * k as f64 / (n - 1) as f64).collect();
    let mut power = PowerTrace::exponential(times.clone(), 1.0, truth.gamma_1);
    for v in &mut power.values {
        *v += cfg.power_noise * Distribution::<f64>::sample(&StandardNormal, rng);
    }
    // the drive stays at the nominal frequency, so δ = −offset
    let mut quadrature = QuadratureTrace::exponential(times, Complex64::new(1.0, 0.0), truth.gamma_2, -truth.freq_offset);
    let s = cfg.quadrature_noise / 2f64.sqrt();
    for v in &mut quadrature.values {
        let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        *v += Complex64::new(a, b) * s;
    }
    DecayRecord { power, quadrature }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    pub gamma_1: f64,
    pub gamma_1_err: f64,
    pub gamma_2: f64,
    pub gamma_2_err: f64,
    /// Γ2 − Γ1/2; may be negative.
    pub gamma_phi: f64,
    pub gamma_phi_err: f64,
    /// f_drive − f01 from the quadrature fit, Hz.
    pub detuning: f64,
    pub converged: bool,
    /// Set when a trace covers fewer than three decay constants.
    pub short_trace: bool,
}

fn check_trace(times: &[f64], len: usize) -> Result<()> {
    if times.len() != len {
        return Err(Error::Format("times and values differ in length".into()));
    }
    if len < 8 {
        return Err(Error::InsufficientData(format!("{len} points")));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("times", "must be strictly increasing"));
    }
    Ok(())
}

/// Weighted straight-line fit; returns (slope, intercept, slope_err).
fn line_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for k in 0..x.len() {
        sxx += w[k] * (x[k] - mx).powi(2);
        sxy += w[k] * (x[k] - mx) * (y[k] - my);
    }
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let n = x.len();
    let s2 = if n > 2 {
        (0..n).map(|k| w[k] * (y[k] - icpt - slope * x[k]).powi(2)).sum::<f64>() / (n - 2) as f64
    } else {
        f64::NAN
    };
    (slope, icpt, (s2 / sxx).sqrt())
}

/// Fit P0·exp(−2πΓ1 t); returns (Γ1, σ, converged, short).
fn fit_power(trace: &PowerTrace) -> Result<(f64, f64, bool, bool)> {
    check_trace(&trace.times, trace.values.len())?;
    let (t, v) = (&trace.times, &trace.values);
    let head = v.iter().take(3).sum::<f64>() / 3.0;
    if !(head > 0.0) {
        return Err(Error::FitFailed("power trace does not start positive".into()));
    }
    let keep: Vec<usize> = (0..v.len()).filter(|&k| v[k] > 0.1 * head).collect();
    if keep.len() < 3 {
        return Err(Error::FitFailed("power trace has no decay to fit".into()));
    }
    let x: Vec<f64> = keep.iter().map(|&k| t[k]).collect();
    let y: Vec<f64> = keep.iter().map(|&k| v[k].ln()).collect();
    let (slope, icpt, _) = line_fit(&x, &y, &vec![1.0; x.len()]);
    if !(slope < 0.0) {
        return Err(Error::FitFailed("power trace is not decaying".into()));
    }
    let g0 = -slope / TWO_PI;
    let resid = |p: &[f64]| -> Vec<f64> {
        t.iter()
            .zip(v)
            .map(|(&tk, &vk)| p[0] * (-TWO_PI * p[1] * tk).exp() - vk)
            .collect()
    };
    let fit = levenberg_marquardt(resid, &[icpt.exp(), g0], &[head, g0], LmOptions::default());
    let g = fit.params[1];
    if !(g > 0.0) {
        return Err(Error::FitFailed("fitted power decay rate is not positive".into()));
    }
    let err = fit.std_errors().map_or(f64::NAN, |e| e[1]);
    let span = t[t.len() - 1] - t[0];
    Ok((g, err, fit.converged, TWO_PI * g * span < 3.0))
}

/// Fit A·exp((−2πΓ2 + 2πiδ)t); returns (Γ2, σ, δ, converged, short).
fn fit_quadrature(trace: &QuadratureTrace) -> Result<(f64, f64, f64, bool, bool)> {
    check_trace(&trace.times, trace.values.len())?;
    let (t, v) = (&trace.times, &trace.values);
    let phase = frequency_from_phase(trace, 0.0)?;
    let a0 = v[0].norm().max(v[1].norm());
    let keep: Vec<usize> = (0..v.len()).filter(|&k| v[k].norm() > 0.1 * a0).collect();
    if keep.len() < 3 {
        return Err(Error::FitFailed("quadrature trace has no decay to fit".into()));
    }
    let x: Vec<f64> = keep.iter().map(|&k| t[k]).collect();
    let y: Vec<f64> = keep.iter().map(|&k| v[k].norm().ln()).collect();
    let (slope, _, _) = line_fit(&x, &y, &vec![1.0; x.len()]);
    if !(slope < 0.0) {
        return Err(Error::FitFailed("quadrature trace is not decaying".into()));
    }
    let g0 = -slope / TWO_PI;
    let resid = |p: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * t.len());
        for (&tk, &vk) in t.iter().zip(v) {
            let m = Complex64::new(p[0], p[1]) * Complex64::new(-TWO_PI * p[2] * tk, TWO_PI * p[3] * tk).exp();
            let d = m - vk;
            out.push(d.re);
            out.push(d.im);
        }
        out
    };
    let span = t[t.len() - 1] - t[0];
    let p0 = [v[0].re, v[0].im, g0, phase.detuning];
    let scales = [a0, a0, g0, 1.0 / span];
    let fit = levenberg_marquardt(resid, &p0, &scales, LmOptions::default());
    let g = fit.params[2];
    if !(g > 0.0) {
        return Err(Error::FitFailed("fitted quadrature decay rate is not positive".into()));
    }
    let err = fit.std_errors().map_or(f64::NAN, |e| e[2]);
    Ok((g, err, fit.params[3], fit.converged, TWO_PI * g * span < 3.0))
}

/// Γ1 from the power decay, Γ2 from the quadrature decay, Γφ = Γ2 − Γ1/2.
pub fn estimate_rates_from_decay(power: &PowerTrace, quadrature: &QuadratureTrace) -> Result<RateEstimate> {
    let (g1, e1, c1, s1) = fit_power(power)?;
    let (g2, e2, det, c2, s2) = fit_quadrature(quadrature)?;
    Ok(RateEstimate {
        gamma_1: g1,
        gamma_1_err: e1,
        gamma_2: g2,
        gamma_2_err: e2,
        gamma_phi: g2 - g1 / 2.0,
        gamma_phi_err: (e2 * e2 + e1 * e1 / 4.0).sqrt(),
        detuning: det,
        converged: c1 && c2,
        short_trace: s1 || s2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseFrequency {
    /// δω01/2π = f_drive − f01, Hz.
    pub detuning: f64,
    pub detuning_err: f64,
    pub qubit_frequency: f64,
    /// A step between neighbouring samples exceeded π/2, so the unwrapped
    /// phase may be off by 2π.
    pub ambiguous: bool,
}

/// Linear fit to the unwrapped phase of ⟨a⟩ ∝ e^{iδω01 t}, weighted by |⟨a⟩|².
/// Samples below a tenth of the peak amplitude are ignored.
pub fn frequency_from_phase(trace: &QuadratureTrace, drive_freq: f64) -> Result<PhaseFrequency> {
    check_trace(&trace.times, trace.values.len())?;
    let peak = trace.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::FitFailed("quadrature trace is zero".into()));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut ambiguous = false;
    let mut prev: Option<f64> = None;
    for (&t, &v) in trace.times.iter().zip(&trace.values) {
        if v.norm() < 0.1 * peak {
            break;
        }
        let raw = v.arg();
        let ph = match prev {
            None => raw,
            Some(p) => {
                let d = (raw - p + PI).rem_euclid(TWO_PI) - PI;
                ambiguous |= d.abs() > PI / 2.0;
                p + d
            }
        };
        prev = Some(ph);
        x.push(t);
        y.push(ph);
        w.push(v.norm_sqr());
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData("fewer than 3 samples above the noise".into()));
    }
    let (slope, _, err) = line_fit(&x, &y, &w);
    let detuning = slope / TWO_PI;
    Ok(PhaseFrequency {
        detuning,
        detuning_err: err / TWO_PI,
        qubit_frequency: drive_freq - detuning,
        ambiguous,
    })
}

fn estimate_slot(rec: &DecayRecord) -> Result<SlotEstimate> {
    let rates = estimate_rates_from_decay(&rec.power, &rec.quadrature)?;
    let phase = frequency_from_phase(&rec.quadrature, 0.0)?;
    let (g1, g2) = (rates.gamma_1, rates.gamma_2);
    let eta_p = rates.gamma_phi / g2;
    let eta_p_err = ((rates.gamma_1_err / (2.0 * g2)).powi(2) + (g1 * rates.gamma_2_err / (2.0 * g2 * g2)).powi(2)).sqrt();
    Ok(SlotEstimate {
        freq_offset: -phase.detuning,
        freq_offset_err: phase.detuning_err,
        eta_p,
        eta_p_err,
        rates,
    })
}

impl StabilityTimeline {
    /// Run the estimators on every slot that carries a record.
    pub fn analyze(&mut self) {
        self.slots.par_iter_mut().for_each(|s| {
            if let Some(rec) = &s.record {
                match estimate_slot(rec) {
                    Ok(e) => s.estimate = Some(e),
                    Err(e) => s.error = Some(e.to_string()),
                }
            }
        });
    }

    /// Pooled count of (Γ1, Γ2, Γφ) estimates within `k` error bars of the
    /// truth, and the number of estimates considered.
    pub fn coverage(&self, k: f64) -> (usize, usize) {
        let mut hit = 0;
        let mut total = 0;
        for s in &self.slots {
            let Some(e) = &s.estimate else { continue };
            let r = &e.rates;
            for (est, err, truth) in [
                (r.gamma_1, r.gamma_1_err, s.truth.gamma_1),
                (r.gamma_2, r.gamma_2_err, s.truth.gamma_2),
                (r.gamma_phi, r.gamma_phi_err, s.truth.gamma_phi),
            ] {
                total += 1;
                if (est - truth).abs() <= k * err {
                    hit += 1;
                }
            }
        }
        (hit, total)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "wall_time",
            "flux_point",
            "flux",
            "gamma_1",
            "gamma_1_err",
            "gamma_2",
            "gamma_2_err",
            "gamma_phi",
            "gamma_phi_err",
            "freq_offset",
            "freq_offset_err",
            "eta_p",
            "eta_p_err",
            "true_gamma_1",
            "true_gamma_2",
            "true_gamma_phi",
            "true_freq_offset",
            "true_eta_p",
        ])?;
        let fmt = |x: f64| format!("{x:e}");
        for s in &self.slots {
            let est = match &s.estimate {
                Some(e) => [
                    e.rates.gamma_1,
                    e.rates.gamma_1_err,
                    e.rates.gamma_2,
                    e.rates.gamma_2_err,
                    e.rates.gamma_phi,
                    e.rates.gamma_phi_err,
                    e.freq_offset,
                    e.freq_offset_err,
                    e.eta_p,
                    e.eta_p_err,
                ],
                None => [f64::NAN; 10],
            };
            let t = &s.truth;
            let mut row = vec![fmt(s.wall_time), s.flux_point_id.to_string(), fmt(s.flux)];
            row.extend(est.iter().map(|&x| fmt(x)));
            row.extend([t.gamma_1, t.gamma_2, t.gamma_phi, t.freq_offset, t.eta_p].iter().map(|&x| fmt(x)));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::flux_derivative;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn times(n: usize, t_max: f64) -> Vec<f64> {
        (0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn zero_rate_is_constant() {
        let tls = TelegraphTLS { state: true, ..TelegraphTLS::new(0.0, 40e3).unwrap() };
        let s = simulate_telegraph(1e6, &tls, 1e3, 1).unwrap();
        assert!(s.states.iter().all(|&x| x));
        assert!(s.switch_times.is_empty());
    }

    #[test]
    fn stationary_fraction_is_half() {
        let tls = TelegraphTLS::new(1.0, 40e3).unwrap();
        let s = simulate_telegraph(1e6, &tls, 10.0, 5).unwrap();
        assert!(s.switch_times.len() > 990_000);
        let frac = s.active_fraction(0.0, 1e6);
        assert!((frac - 0.5).abs() < 0.02 * 0.5, "{frac}");
        let grid = s.states.iter().filter(|&&x| x).count() as f64 / s.states.len() as f64;
        assert!((grid - 0.5).abs() < 0.01);
    }

    #[test]
    fn dwell_times_match_rates() {
        for (gamma, mean) in [(34.7e-6, 2.88e4), (127.9e-6, 7.82e3)] {
            let tls = TelegraphTLS::new(gamma, 40e3).unwrap();
            let s = simulate_telegraph(5000.0 / gamma, &tls, 1.0 / gamma, 11).unwrap();
            let (on, off) = s.dwell_times();
            let all: Vec<f64> = on.into_iter().chain(off).collect();
            let m = all.iter().sum::<f64>() / all.len() as f64;
            assert!((m - mean).abs() < 0.05 * mean, "{m} vs {mean}");
            assert!((m * gamma - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn telegraph_is_deterministic() {
        let tls = TelegraphTLS::new(1e-3, 40e3).unwrap();
        let a = simulate_telegraph(1e5, &tls, 10.0, 3).unwrap();
        let b = simulate_telegraph(1e5, &tls, 10.0, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn active_fraction_oracle() {
        let s = TelegraphSeries {
            dt: 1.0,
            duration: 10.0,
            initial: false,
            states: vec![],
            switch_times: vec![2.0, 5.0, 6.0],
        };
        assert_abs_diff_eq!(s.active_fraction(0.0, 10.0), 0.3 + 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.active_fraction(3.0, 4.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.active_fraction(4.0, 7.0), 1.0 / 3.0 + 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.switches_in(0.0, 5.5), 2);
        let (on, off) = s.dwell_times();
        assert_eq!(on, vec![3.0]);
        assert_eq!(off, vec![1.0]);
    }

    #[test]
    fn coupling_consistency() {
        assert!(TelegraphTLS::new(1e-4, 4e3).unwrap().with_coupling(100e3, 2.5e6).is_ok());
        // the measured ~40 kHz shift is not g²/Δ for g = 100 kHz, Δ = 2.5 MHz
        assert!(TelegraphTLS::new(1e-4, 40e3).unwrap().with_coupling(100e3, 2.5e6).is_err());
    }

    #[test]
    fn relaxation_contribution() {
        let tls = TelegraphTLS::new(1e-4, 4e3).unwrap().with_coupling(100e3, 2.5e6).unwrap();
        let r = tls_relaxation_contribution(&tls).unwrap();
        assert_abs_diff_eq!(r.rate / tls.gamma_switch, 0.0016, epsilon = 1e-12);
        assert!(r.dispersive);
        let zero = TelegraphTLS::new(1e-4, 0.0).unwrap().with_coupling(0.0, 2.5e6).unwrap();
        assert_eq!(tls_relaxation_contribution(&zero).unwrap().rate, 0.0);
        let strong = TelegraphTLS::new(1e-4, 1.6e6 / 2.5).unwrap().with_coupling(400e3, 0.25e6).unwrap();
        assert!(!tls_relaxation_contribution(&strong).unwrap().dispersive);
        assert!(tls_relaxation_contribution(&TelegraphTLS::new(1e-4, 4e3).unwrap()).is_err());
    }

    #[test]
    fn noiseless_no_dephasing_identity() {
        let t = times(200, 6e-6);
        let p = PowerTrace::exponential(t.clone(), 1.0, 376e3);
        let q = QuadratureTrace::exponential(t, Complex64::new(0.6, -0.2), 188e3, 0.0);
        let e = estimate_rates_from_decay(&p, &q).unwrap();
        assert!(e.gamma_phi.abs() < 1e-6 * e.gamma_2, "{e:?}");
        assert_abs_diff_eq!(e.gamma_1, 376e3, epsilon = 1e-3);
        assert!(!e.short_trace);
    }

    #[test]
    fn negative_dephasing_is_kept() {
        let t = times(200, 6e-6);
        let p = PowerTrace::exponential(t.clone(), 1.0, 376e3);
        let q = QuadratureTrace::exponential(t, Complex64::new(1.0, 0.0), 180e3, 0.0);
        let e = estimate_rates_from_decay(&p, &q).unwrap();
        assert_abs_diff_eq!(e.gamma_phi, -8e3, epsilon = 1e-3);
    }

    #[test]
    fn flat_trace_fails() {
        let t = times(100, 6e-6);
        let p = PowerTrace { times: t.clone(), values: vec![1.0; 100] };
        let q = QuadratureTrace::exponential(t, Complex64::new(1.0, 0.0), 188e3, 0.0);
        assert!(matches!(estimate_rates_from_decay(&p, &q), Err(Error::FitFailed(_))));
    }

    #[test]
    fn short_trace_flagged() {
        let t = times(100, 1e-6);
        let p = PowerTrace::exponential(t.clone(), 1.0, 376e3);
        let q = QuadratureTrace::exponential(t, Complex64::new(1.0, 0.0), 188e3, 0.0);
        assert!(estimate_rates_from_decay(&p, &q).unwrap().short_trace);
    }

    fn noisy_pair(seed: u64, g1: f64, g2: f64, det: f64, sigma: f64) -> (PowerTrace, QuadratureTrace) {
        let truth = SlotTruth {
            gamma_1: g1,
            gamma_2: g2,
            gamma_phi: g2 - g1 / 2.0,
            freq_offset: -det,
            eta_p: 0.0,
            flux_offset: 0.0,
            tls_active: vec![],
        };
        let cfg = DecayRecordConfig {
            power_noise: sigma,
            quadrature_noise: sigma,
            ..DecayRecordConfig::default()
        };
        let rec = synth_record(&cfg, &truth, &mut ChaCha8Rng::seed_from_u64(seed));
        (rec.power, rec.quadrature)
    }

    #[test]
    fn dephasing_recovered_within_two_sigma() {
        let hits = (0..100)
            .filter(|&s| {
                let (p, q) = noisy_pair(s, 376e3, 200e3, 0.0, 0.01);
                let e = estimate_rates_from_decay(&p, &q).unwrap();
                (e.gamma_phi - 12e3).abs() < 2.0 * e.gamma_phi_err
            })
            .count();
        assert!(hits >= 90, "{hits}");
    }

    #[test]
    fn quadrature_rate_near_193khz() {
        let (p, q) = noisy_pair(7, 376e3, 193e3, 0.0, 0.02);
        let e = estimate_rates_from_decay(&p, &q).unwrap();
        assert!((e.gamma_2 - 193e3).abs() < 3.0 * e.gamma_2_err);
        assert!(e.gamma_2_err < 4e3);
    }

    #[test]
    fn phase_frequency() {
        let t = times(200, 6e-6);
        let q = QuadratureTrace::exponential(t.clone(), Complex64::new(0.3, 0.4), 188e3, 0.0);
        assert_abs_diff_eq!(frequency_from_phase(&q, 5.5e9).unwrap().detuning, 0.0, epsilon = 1e-6);
        let (_, q) = noisy_pair(3, 376e3, 188e3, 40e3, 0.01);
        let f = frequency_from_phase(&q, 5.5e9).unwrap();
        assert!((f.detuning - 40e3).abs() < 1e3, "{f:?}");
        assert_abs_diff_eq!(f.qubit_frequency, 5.5e9 - f.detuning, epsilon = 1e-3);
        assert!(!f.ambiguous);
        // a third of the radiative linewidth
        let (_, q) = noisy_pair(4, 376e3, 188e3, -90e3, 0.01);
        let f = frequency_from_phase(&q, 5.5e9).unwrap();
        assert!((f.detuning + 90e3).abs() < 3.0 * f.detuning_err.max(1e3));
    }

    #[test]
    fn undersampled_phase_is_flagged() {
        let t = times(20, 6e-6);
        let q = QuadratureTrace::exponential(t, Complex64::new(1.0, 0.0), 50e3, 1.2e6);
        assert!(frequency_from_phase(&q, 0.0).unwrap().ambiguous);
    }

    fn quiet() -> StabilityConfig {
        StabilityConfig {
            flux_noise: false,
            emit_records: false,
            ..StabilityConfig::default()
        }
    }

    #[test]
    fn no_noise_is_flat() {
        let params = DeviceParams::table1();
        let tl = generate_stability_dataset(&quiet(), &params).unwrap();
        for id in 0..2 {
            let v: Vec<&SlotTruth> = tl.slots.iter().filter(|s| s.flux_point_id == id).map(|s| &s.truth).collect();
            assert!(v.iter().all(|t| t == &v[0]));
            assert_eq!(v[0].freq_offset, 0.0);
            assert_eq!(v[0].gamma_phi, 0.0);
        }
        assert!(tl.slots.iter().enumerate().all(|(i, s)| s.flux_point_id == i % 2));
    }

    #[test]
    fn odd_slots_rejected() {
        let cfg = StabilityConfig { slots: 7, ..quiet() };
        assert!(generate_stability_dataset(&cfg, &DeviceParams::table1()).is_err());
    }

    #[test]
    fn tls_steps_are_chi() {
        let cfg = StabilityConfig {
            tls: vec![TelegraphTLS::new(34.7e-6, 40e3).unwrap()],
            ..quiet()
        };
        let tl = generate_stability_dataset(&cfg, &DeviceParams::table1()).unwrap();
        let offsets: Vec<f64> = tl
            .slots
            .iter()
            .filter(|s| s.flux_point_id == 0 && (s.truth.tls_active[0] == 0.0 || s.truth.tls_active[0] == 1.0))
            .map(|s| s.truth.freq_offset)
            .collect();
        assert!(offsets.contains(&0.0) && offsets.contains(&40e3));
        assert!(offsets.iter().all(|&x| x == 0.0 || x == 40e3));
    }

    #[test]
    fn flux_jump_frequency_step() {
        let params = DeviceParams::table1();
        let dphi = 5e-5;
        let cfg = StabilityConfig {
            flux_jumps: FluxJumpModel {
                rate: 1.0 / (50.0 * 3600.0),
                amplitude: JumpAmplitude::Fixed { value: dphi },
            },
            seed: 2,
            ..quiet()
        };
        let tl = generate_stability_dataset(&cfg, &params).unwrap();
        let det: Vec<&SlotTruth> = tl.slots.iter().filter(|s| s.flux_point_id == 1).map(|s| &s.truth).collect();
        let step = det
            .windows(2)
            .find(|w| (w[1].flux_offset - w[0].flux_offset - dphi).abs() < 1e-12)
            .expect("at least one jump");
        let df = step[1].freq_offset - step[0].freq_offset;
        let phi = 0.09 + step[0].flux_offset;
        let oracle = flux_derivative(phi, &params).unwrap() * dphi;
        let fd = (flux_to_frequency(phi + 1e-7, &params).unwrap() - flux_to_frequency(phi - 1e-7, &params).unwrap()) / 2e-7 * dphi;
        assert!((df - oracle).abs() < 0.01 * oracle.abs());
        assert!((df - fd).abs() < 0.01 * fd.abs());
    }

    #[test]
    fn dataset_is_deterministic() {
        let mut cfg = StabilityConfig::reference_device();
        cfg.slots = 20;
        let params = DeviceParams::table1();
        let a = generate_stability_dataset(&cfg, &params).unwrap();
        let b = generate_stability_dataset(&cfg, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_has_one_row_per_slot() {
        let mut cfg = StabilityConfig::reference_device();
        cfg.slots = 10;
        let mut tl = generate_stability_dataset(&cfg, &DeviceParams::table1()).unwrap();
        tl.analyze();
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("wall_time,flux_point"));
    }

    proptest! {
        #[test]
        fn prop_relaxation_quadratic(g in 1e3f64..1e5, d in 1e6f64..1e7) {
            let base = TelegraphTLS::new(1e-4, g * g / d).unwrap().with_coupling(g, d).unwrap();
            let quad = TelegraphTLS::new(1e-4, 16.0 * g * g / d).unwrap().with_coupling(4.0 * g, d).unwrap();
            let r1 = tls_relaxation_contribution(&base).unwrap().rate;
            let r4 = tls_relaxation_contribution(&quad).unwrap().rate;
            prop_assert!((r4 / r1 - 16.0).abs() < 1e-9);
        }

        #[test]
        fn prop_fraction_bounded(seed in 0u64..1000, a in 0.0f64..5e4, len in 1.0f64..5e4) {
            let tls = TelegraphTLS::new(1e-3, 1.0).unwrap();
            let s = simulate_telegraph(1e5, &tls, 100.0, seed).unwrap();
            let f = s.active_fraction(a, a + len);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
