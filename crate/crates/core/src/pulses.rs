//! Drive envelopes, emitted fields, drive cancellation and photon accounting.
//!
//! Field amplitudes are in photon-flux units: `|a|²` is photons per second.
//! A drive `a(t)` produces the angular Rabi rate `Ω(t) = 2·sqrt(2π·Γr)·a(t)`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::device::{RateSet, HBAR, TWO_PI};
use crate::dynamics::QubitTrajectory;
use crate::error::{invalid, Error, Result};
use crate::optimize::{nelder_mead, SimplexOptions};

/// Uniformly sampled complex amplitude, `t_k = k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexEnvelope {
    pub dt: f64,
    pub samples: Vec<Complex64>,
    /// Offset of the carrier from the frame the samples are written in, Hz.
    pub carrier_detuning: f64,
}

impl ComplexEnvelope {
    pub fn new(dt: f64, samples: Vec<Complex64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", format!("must be > 0, got {dt}")));
        }
        if samples.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid("samples", "non-finite amplitude"));
        }
        Ok(Self {
            dt,
            samples,
            carrier_detuning: 0.0,
        })
    }

    pub fn zeros(n: usize, dt: f64) -> Result<Self> {
        Self::new(dt, vec![Complex64::new(0.0, 0.0); n])
    }

    /// A constant drive, e.g. for Rabi oscillations.
    pub fn constant(value: Complex64, n: usize, dt: f64) -> Result<Self> {
        Self::new(dt, vec![value; n])
    }

    pub fn with_carrier(mut self, detuning: f64) -> Self {
        self.carrier_detuning = detuning;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of the last sample.
    pub fn duration(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Trapezoidal `∫|a|² dt`; photons for a field envelope.
    pub fn energy(&self) -> f64 {
        trapezoid(self.samples.iter().map(|z| z.norm_sqr()), self.dt)
    }

    /// Trapezoidal `∫a dt`.
    pub fn integral(&self) -> Complex64 {
        let n = self.len();
        if n < 2 {
            return Complex64::new(0.0, 0.0);
        }
        let inner: Complex64 = self.samples[1..n - 1].iter().sum();
        (inner + (self.samples[0] + self.samples[n - 1]) * 0.5) * self.dt
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            dt: self.dt,
            samples: self.samples.iter().map(|z| z * c).collect(),
            carrier_detuning: self.carrier_detuning,
        }
    }

    /// Append `n` zero samples, e.g. to follow a free decay after a pulse.
    pub fn padded(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.samples.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(n));
        out
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Format(format!(
                "envelope lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        if (self.dt - other.dt).abs() > 1e-12 * self.dt {
            return Err(Error::Format(format!(
                "envelope steps differ: {:e} vs {:e}",
                self.dt, other.dt
            )));
        }
        Ok(())
    }

    /// Write as CSV with a `# dt=…` header line followed by `t,re,im` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# dt={:e} s; carrier_detuning={:e} Hz; amplitude units sqrt(photons/s)",
            self.dt, self.carrier_detuning
        )?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "re", "im"])?;
        for (k, z) in self.samples.iter().enumerate() {
            wtr.write_record([
                format!("{:e}", self.time(k)),
                format!("{:e}", z.re),
                format!("{:e}", z.im),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read the format produced by [`write_csv`](Self::write_csv). Without a
    /// header line, `dt` is taken from the first two time stamps.
    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut dt = None;
        let mut carrier = 0.0;
        let mut body = text.as_str();
        if let Some(rest) = text.strip_prefix('#') {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            body = tail;
            for item in line.split(';') {
                let item = item.trim();
                if let Some(v) = item.strip_prefix("dt=") {
                    dt = Some(parse_leading_f64(v)?);
                } else if let Some(v) = item.strip_prefix("carrier_detuning=") {
                    carrier = parse_leading_f64(v)?;
                }
            }
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(format!("expected 3 columns, got {}", rec.len())));
            }
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}"))))
                .collect::<Result<_>>()?;
            times.push(v[0]);
            samples.push(Complex64::new(v[1], v[2]));
        }
        let dt = match dt {
            Some(dt) => dt,
            None if times.len() >= 2 => times[1] - times[0],
            None => return Err(Error::Format("cannot infer dt from fewer than two rows".into())),
        };
        Ok(Self::new(dt, samples)?.with_carrier(carrier))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn parse_leading_f64(s: &str) -> Result<f64> {
    let tok = s.split_whitespace().next().unwrap_or("");
    tok.parse().map_err(|e| Error::Parse(format!("{tok}: {e}")))
}

pub(crate) fn trapezoid(values: impl Iterator<Item = f64>, dt: f64) -> f64 {
    let mut sum = 0.0;
    let mut first = None;
    let mut last = 0.0;
    let mut n = 0usize;
    for v in values {
        if first.is_none() {
            first = Some(v);
        }
        sum += v;
        last = v;
        n += 1;
    }
    if n < 2 {
        return 0.0;
    }
    (sum - 0.5 * (first.unwrap_or(0.0) + last)) * dt
}

/// Angular Rabi rate produced by field amplitude `a` on a qubit with
/// radiative rate `gamma_r` (Hz).
pub fn rabi_from_field(a: Complex64, gamma_r: f64) -> Complex64 {
    a * (2.0 * (TWO_PI * gamma_r).sqrt())
}

/// Field amplitude needed for angular Rabi rate `omega`.
pub fn field_from_rabi(omega: Complex64, gamma_r: f64) -> Complex64 {
    omega / (2.0 * (TWO_PI * gamma_r).sqrt())
}

/// Truncated Gaussian drive of total length `duration` centred in the window.
///
/// The Gaussian is lowered by its value at the window edges so the pulse
/// starts and ends at exactly zero, then scaled so the trapezoidal integral
/// of the angular Rabi rate equals `area`. `detuning` is recorded as the
/// carrier offset; the samples themselves are real.
pub fn gaussian_pulse(
    duration: f64,
    sigma: f64,
    area: f64,
    detuning: f64,
    dt: f64,
    gamma_r: f64,
) -> Result<ComplexEnvelope> {
    if !(area > 0.0 && area.is_finite()) {
        return Err(Error::Domain(format!("pulse area must be > 0, got {area}")));
    }
    if !(sigma > 0.0 && duration >= 4.0 * sigma) {
        return Err(invalid("sigma", "need sigma > 0 and duration >= 4 sigma"));
    }
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be > 0"));
    }
    if !(gamma_r > 0.0 && gamma_r.is_finite()) {
        return Err(invalid("gamma_r", "must be > 0 to convert area to field"));
    }
    let steps = duration / dt;
    let n_steps = steps.round();
    if (steps - n_steps).abs() > 1e-9 * steps.max(1.0) || n_steps < 2.0 {
        return Err(invalid("dt", "must divide the pulse duration"));
    }
    let n = n_steps as usize + 1;
    let centre = duration / 2.0;
    let pedestal = (-(centre * centre) / (2.0 * sigma * sigma)).exp();
    let shape: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * dt - centre;
            ((-(t * t) / (2.0 * sigma * sigma)).exp() - pedestal).max(0.0)
        })
        .collect();
    let norm = trapezoid(shape.iter().copied(), dt);
    let scale = field_from_rabi(Complex64::new(area / norm, 0.0), gamma_r);
    let samples = shape.iter().map(|g| scale * g).collect();
    Ok(ComplexEnvelope::new(dt, samples)?.with_carrier(detuning))
}

/// Default Gaussian width for a pulse window: six standard deviations.
pub fn default_sigma(duration: f64) -> f64 {
    duration / 6.0
}

/// Coherent emission `−i·sqrt(2π·Γr)·⟨σ−(t)⟩` on the trajectory's grid.
pub fn emitted_field(traj: &QubitTrajectory, gamma_r: f64) -> Result<ComplexEnvelope> {
    let c = Complex64::new(0.0, -(TWO_PI * gamma_r).sqrt());
    ComplexEnvelope::new(traj.dt(), traj.coherence.iter().map(|s| c * s).collect())
}

/// Reflected field `a_in − i·sqrt(2π·Γr)·⟨σ−⟩` for a qubit terminating the line.
pub fn output_field(drive: &ComplexEnvelope, traj: &QubitTrajectory, gamma_r: f64) -> Result<ComplexEnvelope> {
    if traj.len() != drive.len() {
        return Err(Error::Format("trajectory and drive lengths differ".into()));
    }
    let em = emitted_field(traj, gamma_r)?;
    let samples = drive.samples.iter().zip(&em.samples).map(|(a, e)| a + e).collect();
    ComplexEnvelope::new(drive.dt, samples)
}

/// Ideal photon number radiated by a qubit left in an equal superposition.
pub fn ideal_emission_photons(rates: &RateSet) -> f64 {
    rates.gamma_r / (8.0 * rates.gamma_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CancellationSetting {
    pub amp_scale: f64,
    /// rad
    pub phase: f64,
    /// s
    pub delay: f64,
}

impl CancellationSetting {
    /// Exact negative of the drive.
    pub fn ideal() -> Self {
        Self {
            amp_scale: 1.0,
            phase: PI,
            delay: 0.0,
        }
    }
}

/// `x(t − delay)` by band-limited (Fourier) interpolation on a zero-padded grid.
pub fn fractional_delay(samples: &[Complex64], dt: f64, delay: f64) -> Vec<Complex64> {
    let n = samples.len();
    if delay == 0.0 || n == 0 {
        return samples.to_vec();
    }
    let m = 2 * n;
    let mut buf: Vec<Complex64> = samples.to_vec();
    buf.resize(m, Complex64::new(0.0, 0.0));
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(m).process(&mut buf);
    let shift = delay / dt;
    for (k, z) in buf.iter_mut().enumerate() {
        let freq = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 } / m as f64;
        let ph = -TWO_PI * freq * shift;
        if 2 * k == m {
            // Nyquist bin: keep the symmetric (real) part of the phase ramp
            *z *= ph.cos();
        } else {
            *z *= Complex64::from_polar(1.0, ph);
        }
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    buf.truncate(n);
    let inv = 1.0 / m as f64;
    buf.iter().map(|z| z * inv).collect()
}

/// `reflected + amp_scale·e^{i·phase}·original(t − delay)`.
pub fn apply_cancellation(
    reflected: &ComplexEnvelope,
    original: &ComplexEnvelope,
    setting: &CancellationSetting,
) -> Result<ComplexEnvelope> {
    reflected.check_same_grid(original)?;
    if !(setting.amp_scale >= 0.0) {
        return Err(invalid("amp_scale", "must be >= 0"));
    }
    if setting.delay.abs() >= original.duration().max(original.dt) {
        return Err(invalid("delay", "must be shorter than the envelope"));
    }
    let delayed = fractional_delay(&original.samples, original.dt, setting.delay);
    let c = Complex64::from_polar(setting.amp_scale, setting.phase);
    let samples = reflected
        .samples
        .iter()
        .zip(&delayed)
        .map(|(r, o)| r + c * o)
        .collect();
    Ok(ComplexEnvelope {
        dt: reflected.dt,
        samples,
        carrier_detuning: reflected.carrier_detuning,
    })
}

/// Suppression in dB of `residual` relative to `input` energy.
pub fn suppression_db(input_energy: f64, residual_energy: f64) -> f64 {
    10.0 * (input_energy / residual_energy).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CancellationFit {
    pub setting: CancellationSetting,
    pub residual_energy: f64,
    pub input_energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl CancellationFit {
    pub fn suppression_db(&self) -> f64 {
        suppression_db(self.input_energy, self.residual_energy)
    }
}

/// Minimize the residual energy after cancellation with a simplex search over
/// amplitude, phase and delay. Returns the best point found; `converged` is
/// false if the iteration budget ran out first.
pub fn calibrate_cancellation(
    reflected: &ComplexEnvelope,
    original: &ComplexEnvelope,
    init: &CancellationSetting,
) -> Result<CancellationFit> {
    calibrate_cancellation_with(reflected, original, init, SimplexOptions::default())
}

pub fn calibrate_cancellation_with(
    reflected: &ComplexEnvelope,
    original: &ComplexEnvelope,
    init: &CancellationSetting,
    opts: SimplexOptions,
) -> Result<CancellationFit> {
    reflected.check_same_grid(original)?;
    let input_energy = reflected.energy();
    if !(input_energy > 0.0) || !(original.energy() > 0.0) {
        return Err(Error::Domain("cancellation needs nonzero input energy".into()));
    }
    let max_delay = 0.5 * original.duration();
    // delay is searched in units of dt to keep the simplex well scaled
    let dt = original.dt;
    let residual = |x: &[f64]| -> f64 {
        let setting = CancellationSetting {
            amp_scale: x[0].abs(),
            phase: x[1],
            delay: (x[2] * dt).clamp(-max_delay, max_delay),
        };
        apply_cancellation(reflected, original, &setting)
            .map(|e| e.energy())
            .unwrap_or(f64::INFINITY)
    };
    let x0 = [init.amp_scale, init.phase, init.delay / dt];
    let res = nelder_mead(residual, &x0, &[0.05, 0.05, 2.0], opts);
    let setting = CancellationSetting {
        amp_scale: res.x[0].abs(),
        phase: res.x[1].rem_euclid(TWO_PI),
        delay: (res.x[2] * dt).clamp(-max_delay, max_delay),
    };
    Ok(CancellationFit {
        setting,
        residual_energy: res.value,
        input_energy,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Voltage amplitude carried by photon-flux amplitude `a` at frequency `f`:
/// `|V|²/(2·Z0) = ħω·|a|²`.
pub fn field_to_voltage(env: &ComplexEnvelope, f: f64, z0: f64) -> ComplexEnvelope {
    env.scaled(Complex64::new((2.0 * z0 * HBAR * TWO_PI * f).sqrt(), 0.0))
}

pub fn voltage_to_field(env: &ComplexEnvelope, f: f64, z0: f64) -> ComplexEnvelope {
    env.scaled(Complex64::new(1.0 / (2.0 * z0 * HBAR * TWO_PI * f).sqrt(), 0.0))
}

/// Photon number in a voltage record over `window = (t0, t1)`:
/// `(2·Z0·ħω)⁻¹ ∫(|⟨V⟩|² − |⟨V_N⟩|²) dt`, trapezoidal over the samples inside
/// the window.
pub fn photon_number(
    v: &ComplexEnvelope,
    v_noise: Complex64,
    f: f64,
    z0: f64,
    window: (f64, f64),
) -> Result<f64> {
    let (t0, t1) = window;
    if !(f > 0.0 && z0 > 0.0) {
        return Err(invalid("f", "frequency and impedance must be > 0"));
    }
    let eps = 1e-9 * v.dt;
    if !(t0 < t1) || t0 < -eps || t1 > v.duration() + eps {
        return Err(Error::Domain(format!(
            "window ({t0:e}, {t1:e}) is empty or outside the record"
        )));
    }
    let k0 = ((t0 - eps) / v.dt).ceil().max(0.0) as usize;
    let k1 = (((t1 + eps) / v.dt).floor() as usize).min(v.len() - 1);
    if k1 <= k0 {
        return Err(Error::Domain("window contains fewer than two samples".into()));
    }
    let noise = v_noise.norm_sqr();
    let integral = trapezoid(v.samples[k0..=k1].iter().map(|z| z.norm_sqr() - noise), v.dt);
    Ok(integral / (2.0 * z0 * HBAR * TWO_PI * f))
}

/// Leaked drive photons referred to the ideal emission `Γr/(8Γ2)`.
pub fn leakage_estimate(n_leak_meas: f64, n_q_meas: f64, rates: &RateSet) -> Result<f64> {
    if !(n_q_meas > 0.0 && n_q_meas.is_finite()) {
        return Err(Error::Domain(format!("n_q_meas must be > 0, got {n_q_meas}")));
    }
    if !(n_leak_meas >= 0.0 && n_leak_meas.is_finite()) {
        return Err(Error::Domain(format!("n_leak_meas must be >= 0, got {n_leak_meas}")));
    }
    if !(rates.gamma_2 > 0.0) {
        return Err(Error::Domain("gamma_2 must be > 0".into()));
    }
    Ok(n_leak_meas / n_q_meas * ideal_emission_photons(rates))
}
