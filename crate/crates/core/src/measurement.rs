//! Amplification-chain emulation, mode matching and reference-subtracted
//! field moments.
//!
//! Mode amplitudes are expressed in photon units: `|S|²` counts photons in the
//! filtered mode, with the gain already divided out.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{RateSet, HBAR, TWO_PI};
use crate::error::{invalid, Error, Result};
use crate::pulses::ComplexEnvelope;
use crate::tomography::DensityMatrix;

type C = Complex64;

/// Shots per independent RNG stream; fixing it makes output independent of
/// the thread count.
const BLOCK: usize = 4096;

/// Seed for the bootstrap resampling of moment error bars.
const BOOTSTRAP_SEED: u64 = 0x5eed_b007;
const BOOTSTRAP_RESAMPLES: usize = 200;
const BOOTSTRAP_BLOCKS: usize = 1000;

/// Order-4 moments need at least this many shots.
pub const MIN_SHOTS: usize = 10_000;

/// Conversion between voltage at the digitizer reference plane and photon
/// flux amplitude: `|V|²/(2·Z0) = ħω·|a|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldBridge {
    /// Hz
    pub frequency: f64,
    /// Ω
    pub z0: f64,
}

impl Default for FieldBridge {
    fn default() -> Self {
        Self {
            frequency: 5.510e9,
            z0: 50.0,
        }
    }
}

impl FieldBridge {
    /// Volts per unit photon-flux amplitude.
    pub fn volts_per_field(&self) -> f64 {
        (2.0 * self.z0 * HBAR * TWO_PI * self.frequency).sqrt()
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    /// Power gain of the chain.
    pub gain: f64,
    /// Added noise quanta per mode, referred to the input.
    pub noise_photons: f64,
    /// Digitizer sample rate, Hz.
    pub sample_rate: f64,
    pub n_shots: usize,
    pub seed: u64,
    /// Add the half quantum of vacuum noise to the reference mode.
    #[serde(default = "default_true")]
    pub include_vacuum: bool,
    #[serde(default)]
    pub bridge: FieldBridge,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            noise_photons: 2.0,
            sample_rate: 1e9,
            n_shots: 1_000_000,
            seed: 0,
            include_vacuum: true,
            bridge: FieldBridge::default(),
        }
    }
}

impl MeasurementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(invalid("gain", "must be > 0"));
        }
        if !(self.noise_photons >= 0.0 && self.noise_photons.is_finite()) {
            return Err(invalid("noise_photons", "must be >= 0"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(invalid("sample_rate", "must be > 0"));
        }
        if self.n_shots == 0 {
            return Err(invalid("n_shots", "must be >= 1"));
        }
        if !(self.bridge.frequency > 0.0 && self.bridge.z0 > 0.0) {
            return Err(invalid("bridge", "frequency and impedance must be > 0"));
        }
        Ok(())
    }

    /// Total noise quanta in the reference mode.
    pub fn reference_noise(&self) -> f64 {
        self.noise_photons + if self.include_vacuum { 0.5 } else { 0.0 }
    }
}

/// Mode-matched amplitudes with and without the emitted signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSet {
    pub signal: Vec<C>,
    pub reference: Vec<C>,
    /// Γ1 used in the mode filter, Hz.
    pub filter_rate: f64,
}

impl ShotSet {
    pub fn new(signal: Vec<C>, reference: Vec<C>, filter_rate: f64) -> Result<Self> {
        if signal.len() != reference.len() {
            return Err(Error::Format(format!(
                "signal has {} shots, reference {}",
                signal.len(),
                reference.len()
            )));
        }
        if signal.iter().chain(&reference).any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid("shots", "non-finite amplitude"));
        }
        Ok(Self {
            signal,
            reference,
            filter_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# filter_rate={:e} Hz; amplitudes in sqrt(photons)", self.filter_rate)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["shot", "re_s", "im_s", "re_r", "im_r"])?;
        for (i, (s, r)) in self.signal.iter().zip(&self.reference).enumerate() {
            wtr.write_record([
                i.to_string(),
                format!("{:e}", s.re),
                format!("{:e}", s.im),
                format!("{:e}", r.re),
                format!("{:e}", r.im),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut filter_rate = None;
        let mut body = text.as_str();
        if let Some(rest) = text.strip_prefix('#') {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            body = tail;
            for item in line.split(';') {
                if let Some(v) = item.trim().strip_prefix("filter_rate=") {
                    let tok = v.split_whitespace().next().unwrap_or("");
                    filter_rate = Some(tok.parse::<f64>().map_err(|e| Error::Parse(format!("{tok}: {e}")))?);
                }
            }
        }
        let filter_rate = filter_rate.ok_or_else(|| Error::Format("missing filter_rate header".into()))?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let (mut signal, mut reference) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(Error::Format(format!("expected 5 columns, got {}", rec.len())));
            }
            let v: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}"))))
                .collect::<Result<_>>()?;
            signal.push(C::new(v[0], v[1]));
            reference.push(C::new(v[2], v[3]));
        }
        Self::new(signal, reference, filter_rate)
    }
}

/// Shortest record that captures the filtered mode: five amplitude e-folding
/// times of `e^{−Γ1 t/2}` … measured in `1/(2π·Γ1)`.
fn min_record(filter_rate: f64) -> f64 {
    5.0 / (TWO_PI * filter_rate)
}

/// Samples of `f(t) = sqrt(Γ1)·e^{−Γ1 t/2}` (angular Γ1) scaled so that
/// `Σ f² dt = 1` on the given grid.
pub fn mode_filter(filter_rate: f64, dt: f64, n: usize) -> Vec<f64> {
    let g = TWO_PI * filter_rate;
    let raw: Vec<f64> = (0..n).map(|k| (-0.5 * g * k as f64 * dt).exp()).collect();
    let norm = (raw.iter().map(|x| x * x).sum::<f64>() * dt).sqrt();
    raw.into_iter().map(|x| x / norm).collect()
}

/// Project a voltage record onto the photon mode, returning the amplitude in
/// photon units.
pub fn mode_match(record: &ComplexEnvelope, filter_rate: f64, gain: f64, bridge: &FieldBridge) -> Result<C> {
    if !(filter_rate > 0.0) {
        return Err(invalid("filter_rate", "must be > 0"));
    }
    if !(gain > 0.0) {
        return Err(invalid("gain", "must be > 0"));
    }
    let needed = min_record(filter_rate);
    if record.len() as f64 * record.dt < needed {
        return Err(Error::Domain(format!(
            "record of {:e} s is shorter than {needed:e} s",
            record.len() as f64 * record.dt
        )));
    }
    let f = mode_filter(filter_rate, record.dt, record.len());
    let s: C = f.iter().zip(&record.samples).map(|(f, v)| v * *f).sum();
    Ok(s * record.dt / (gain.sqrt() * bridge.volts_per_field()))
}

/// Linear resampling of a field envelope onto a `dt` grid covering the same span.
fn resample(env: &ComplexEnvelope, dt: f64) -> Vec<C> {
    if (env.dt - dt).abs() <= 1e-12 * dt {
        return env.samples.clone();
    }
    let n = (env.duration() / dt).floor() as usize + 1;
    (0..n)
        .map(|k| {
            let x = k as f64 * dt / env.dt;
            let i = (x.floor() as usize).min(env.len().saturating_sub(1));
            let frac = x - i as f64;
            if i + 1 < env.len() {
                env.samples[i] * (1.0 - frac) + env.samples[i + 1] * frac
            } else {
                env.samples[i]
            }
        })
        .collect()
}

fn complex_normal<R: Rng>(rng: &mut R, variance: f64) -> C {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C::new(re * s, im * s)
}

fn block_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One digitized voltage record: the emission plus white noise carrying
/// `reference_noise()` quanta per temporal mode, amplified by `gain`.
pub fn synthesize_record<R: Rng>(emission: &ComplexEnvelope, config: &MeasurementConfig, rng: &mut R) -> Result<ComplexEnvelope> {
    config.validate()?;
    let dt = 1.0 / config.sample_rate;
    let signal = resample(emission, dt);
    let per_sample = config.reference_noise() / dt;
    let scale = config.gain.sqrt() * config.bridge.volts_per_field();
    let v = signal.iter().map(|a| (a + complex_normal(rng, per_sample)) * scale).collect();
    ComplexEnvelope::new(dt, v)
}

/// Single-shot mode amplitudes for a classical emission envelope.
///
/// The white noise of each record projects onto the unit-norm filter as one
/// circular Gaussian of variance `reference_noise()`, so shots are drawn at
/// the mode level rather than by materializing every record; the two are
/// equal in distribution (see [`synthesize_record`]).
pub fn synthesize_shots(emission: &ComplexEnvelope, config: &MeasurementConfig, filter_rate: f64) -> Result<ShotSet> {
    config.validate()?;
    let dt = 1.0 / config.sample_rate;
    let signal = resample(emission, dt);
    if (signal.len() as f64) * dt < min_record(filter_rate) {
        return Err(Error::Domain(format!(
            "emission covers {:e} s; need {:e} s for the mode filter",
            signal.len() as f64 * dt,
            min_record(filter_rate)
        )));
    }
    let f = mode_filter(filter_rate, dt, signal.len());
    let s0: C = f.iter().zip(&signal).map(|(f, a)| a * *f).sum::<C>() * dt;
    let noise = config.reference_noise();
    let n = config.n_shots;
    let blocks: Vec<(Vec<C>, Vec<C>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(config.seed, b as u64);
            let len = BLOCK.min(n - b * BLOCK);
            let mut s = Vec::with_capacity(len);
            let mut r = Vec::with_capacity(len);
            for _ in 0..len {
                s.push(s0 + complex_normal(&mut rng, noise));
                r.push(complex_normal(&mut rng, noise));
            }
            (s, r)
        })
        .collect();
    let (mut signal_shots, mut reference) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (s, r) in blocks {
        signal_shots.extend(s);
        reference.extend(r);
    }
    ShotSet::new(signal_shots, reference, filter_rate)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Largest ratio between the Husimi density of a state confined to the
/// first `dim` Fock levels and the proposal density of CN(0, 2).
fn rejection_bound(dim: usize) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..=40_000 {
        let x = i as f64 * 1e-3;
        let poly: f64 = (0..dim).map(|n| x.powi(n as i32) / factorial(n)).sum();
        best = best.max(2.0 * (-x / 2.0).exp() * poly);
    }
    best * 1.001
}

/// `⟨α|ρ|α⟩` for a density matrix in the Fock basis.
fn husimi_density(rho: &DensityMatrix, alpha: C) -> f64 {
    let d = rho.dim();
    let x = alpha.norm_sqr();
    let mut coh = Vec::with_capacity(d);
    let mut pw = C::new(1.0, 0.0);
    for n in 0..d {
        coh.push(pw / factorial(n).sqrt());
        pw *= alpha;
    }
    let mut acc = C::new(0.0, 0.0);
    let m = rho.matrix();
    for i in 0..d {
        for j in 0..d {
            acc += coh[i].conj() * m[(i, j)] * coh[j];
        }
    }
    acc.re * (-x).exp()
}

/// Single-shot amplitudes of a quantum state of the filtered mode.
///
/// Heterodyne detection samples the Husimi function, which already carries
/// one quantum of noise; the remaining `reference_noise() − 1` quanta are
/// added as circular Gaussian noise.
pub fn synthesize_mode_shots(state: &DensityMatrix, config: &MeasurementConfig, filter_rate: f64) -> Result<ShotSet> {
    config.validate()?;
    let extra = config.reference_noise() - 1.0;
    if extra < -1e-12 {
        return Err(invalid(
            "noise_photons",
            "heterodyne detection adds at least one quantum; reference noise must be >= 1",
        ));
    }
    let extra = extra.max(0.0);
    let bound = rejection_bound(state.dim());
    let n = config.n_shots;
    let blocks: Vec<(Vec<C>, Vec<C>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(config.seed, b as u64);
            let len = BLOCK.min(n - b * BLOCK);
            let mut s = Vec::with_capacity(len);
            let mut r = Vec::with_capacity(len);
            for _ in 0..len {
                let alpha = loop {
                    let a = complex_normal(&mut rng, 2.0);
                    let proposal = (-a.norm_sqr() / 2.0).exp() / (2.0 * PI);
                    let target = husimi_density(state, a) / PI;
                    let u: f64 = rng.random();
                    if u * bound * proposal <= target {
                        break a;
                    }
                };
                s.push(alpha + complex_normal(&mut rng, extra));
                r.push(complex_normal(&mut rng, extra + 1.0));
            }
            (s, r)
        })
        .collect();
    let (mut signal, mut reference) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (s, r) in blocks {
        signal.extend(s);
        reference.extend(r);
    }
    ShotSet::new(signal, reference, filter_rate)
}

/// State of the filtered mode radiated by a qubit left with excited
/// population `rho11` and coherence `sigma_minus0`, decaying freely on
/// resonance and mode-matched with `f(t) = sqrt(Γ1)·e^{−Γ1 t/2}`.
///
/// `⟨a†a⟩ = 2Γr·ρ11/(Γ1 + 2Γ2)`, `⟨a⟩ = −2i·sqrt(ΓrΓ1)·⟨σ−(0)⟩/(Γ1 + 2Γ2)`;
/// a single emitter never places two photons in the mode.
pub fn filtered_mode_state(rho11: f64, sigma_minus0: C, rates: &RateSet) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&rho11) {
        return Err(invalid("rho11", "must lie in [0, 1]"));
    }
    if !(rates.gamma_1 > 0.0) {
        return Err(invalid("gamma_1", "must be > 0"));
    }
    let den = rates.gamma_1 + 2.0 * rates.gamma_2;
    let p = 2.0 * rates.gamma_r * rho11 / den;
    let a = C::new(0.0, -2.0) * (rates.gamma_r * rates.gamma_1).sqrt() * sigma_minus0 / den;
    let mut m = nalgebra::DMatrix::<C>::zeros(3, 3);
    m[(0, 0)] = C::new(1.0 - p, 0.0);
    m[(1, 1)] = C::new(p, 0.0);
    m[(1, 0)] = a;
    m[(0, 1)] = a.conj();
    DensityMatrix::new(m)
}

/// Moments `m[n][k] = ⟨(a†)^n a^k⟩` for `n + k ≤ 4` with error bars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub m: [[C; 5]; 5],
    /// Standard error of each moment, `sqrt(var Re + var Im)`.
    pub sigma: [[f64; 5]; 5],
    /// Covariance between `⟨a†a⟩` and `⟨(a†)²a²⟩`.
    pub cov_11_22: f64,
    pub n_shots: usize,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl MomentSet {
    /// Error-free moments, e.g. from a known state.
    pub fn exact(m: [[C; 5]; 5]) -> Self {
        Self {
            m,
            sigma: [[0.0; 5]; 5],
            cov_11_22: 0.0,
            n_shots: 0,
            flags: Vec::new(),
        }
    }

    pub fn get(&self, n: usize, k: usize) -> C {
        self.m[n][k]
    }

    pub fn mean_field(&self) -> C {
        self.m[0][1]
    }

    pub fn photon_number(&self) -> f64 {
        self.m[1][1].re
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Index pairs `(n, k)` with `n ≤ k`, `n + k ≤ 4`, excluding `(0, 0)`.
const UPPER: [(usize, usize); 8] = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 1), (1, 2), (1, 3), (2, 2)];

#[derive(Clone, Copy)]
struct PowerSums {
    s: [C; 8],
    noise: f64,
    count: usize,
}

impl PowerSums {
    fn zero() -> Self {
        Self {
            s: [C::new(0.0, 0.0); 8],
            noise: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        for i in 0..8 {
            self.s[i] += other.s[i];
        }
        self.noise += other.noise;
        self.count += other.count;
    }

    fn of(signal: &[C], reference: &[C]) -> Self {
        let mut out = Self::zero();
        for (s, r) in signal.iter().zip(reference) {
            let sc = s.conj();
            let mut pw_s = [C::new(1.0, 0.0); 5];
            let mut pw_c = [C::new(1.0, 0.0); 5];
            for p in 1..5 {
                pw_s[p] = pw_s[p - 1] * s;
                pw_c[p] = pw_c[p - 1] * sc;
            }
            for (i, &(n, k)) in UPPER.iter().enumerate() {
                out.s[i] += pw_c[n] * pw_s[k];
            }
            out.noise += r.norm_sqr();
        }
        out.count = signal.len();
        out
    }

    /// Normally ordered moments of `a` given `S = a + h` with `h` Gaussian,
    /// phase-insensitive and carrying `⟨|R|²⟩` quanta.
    fn moments(&self) -> [[C; 5]; 5] {
        let inv = 1.0 / self.count as f64;
        let noise = self.noise * inv;
        let mut raw = [[C::new(0.0, 0.0); 5]; 5];
        raw[0][0] = C::new(1.0, 0.0);
        for (i, &(n, k)) in UPPER.iter().enumerate() {
            raw[n][k] = self.s[i] * inv;
            raw[k][n] = raw[n][k].conj();
        }
        let mut m = [[C::new(0.0, 0.0); 5]; 5];
        m[0][0] = C::new(1.0, 0.0);
        for order in 1..=4 {
            for n in 0..=order / 2 {
                let k = order - n;
                let mut v = raw[n][k];
                for l in 1..=n.min(k) {
                    let c = binomial(n, l) * binomial(k, l) * factorial(l) * noise.powi(l as i32);
                    v -= m[n - l][k - l] * c;
                }
                if n == k {
                    v = C::new(v.re, 0.0);
                }
                m[n][k] = v;
                m[k][n] = v.conj();
            }
        }
        m
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Reference-subtracted moments up to fourth order with block-bootstrap
/// error bars.
pub fn extract_field_moments(shots: &ShotSet, max_order: usize) -> Result<MomentSet> {
    if max_order != 4 {
        return Err(invalid("max_order", "only order 4 is supported"));
    }
    let n = shots.len();
    if n == 0 {
        return Err(Error::InsufficientData("no shots".into()));
    }
    let n_blocks = BOOTSTRAP_BLOCKS.min(n);
    let bounds: Vec<(usize, usize)> = (0..n_blocks)
        .map(|b| (b * n / n_blocks, (b + 1) * n / n_blocks))
        .collect();
    let sums: Vec<PowerSums> = bounds
        .par_iter()
        .map(|&(lo, hi)| PowerSums::of(&shots.signal[lo..hi], &shots.reference[lo..hi]))
        .collect();
    let mut total = PowerSums::zero();
    for s in &sums {
        total.add(s);
    }
    let m = total.moments();

    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut mean = [[C::new(0.0, 0.0); 5]; 5];
    let mut sq = [[0.0f64; 5]; 5];
    let (mut e11, mut e22, mut e1122) = (0.0, 0.0, 0.0);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut acc = PowerSums::zero();
        for _ in 0..n_blocks {
            acc.add(&sums[rng.random_range(0..n_blocks)]);
        }
        let mb = acc.moments();
        for i in 0..5 {
            for j in 0..5 {
                mean[i][j] += mb[i][j];
                sq[i][j] += mb[i][j].norm_sqr();
            }
        }
        e11 += mb[1][1].re;
        e22 += mb[2][2].re;
        e1122 += mb[1][1].re * mb[2][2].re;
    }
    let b = BOOTSTRAP_RESAMPLES as f64;
    let mut sigma = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            if i + j <= 4 && i + j > 0 {
                let mu = mean[i][j] / b;
                sigma[i][j] = (sq[i][j] / b - mu.norm_sqr()).max(0.0).sqrt();
            }
        }
    }
    let cov_11_22 = e1122 / b - (e11 / b) * (e22 / b);

    let mut flags = Vec::new();
    if n < MIN_SHOTS {
        flags.push(format!("only {n} shots; fourth-order moments need at least {MIN_SHOTS}"));
    }
    if m[1][1].re < -3.0 * sigma[1][1] {
        flags.push(format!(
            "non-physical photon number {:.4} (more than 3 sigma below zero)",
            m[1][1].re
        ));
    }
    Ok(MomentSet {
        m,
        sigma,
        cov_11_22,
        n_shots: n,
        flags,
    })
}
