//! Driven, damped qubit dynamics in the rotating frame of the drive.
//!
//! Conventions: `σ− = |0⟩⟨1|`, `σz = |1⟩⟨1| − |0⟩⟨0|`, detuning `Δ = f01 − f_drive`
//! and `H = (Δ/2)σz + (Ωσ+ + Ω*σ−)/2` with the angular Rabi rate
//! `Ω = 2·sqrt(2π·Γr)·a_in`. Integration is fixed-step RK4.

use std::io::Write;

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::{RateSet, TWO_PI};
use crate::error::{invalid, Error, Result};
use crate::optimize::{levenberg_marquardt, LmOptions};
use crate::pulses::{rabi_from_field, ComplexEnvelope};

type C = Complex64;

const I: C = C::new(0.0, 1.0);

/// Sampled qubit state. `populations[k][2]` is zero for two-level runs.
#[derive(Debug, Clone, PartialEq)]
pub struct QubitTrajectory {
    pub times: Vec<f64>,
    pub bloch: Vec<[f64; 3]>,
    pub populations: Vec<[f64; 3]>,
    pub coherence: Vec<C>,
    pub levels: usize,
}

impl QubitTrajectory {
    fn with_capacity(n: usize, levels: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            bloch: Vec::with_capacity(n),
            populations: Vec::with_capacity(n),
            coherence: Vec::with_capacity(n),
            levels,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            return 0.0;
        }
        self.times[1] - self.times[0]
    }

    pub fn final_populations(&self) -> [f64; 3] {
        self.populations.last().copied().unwrap_or([1.0, 0.0, 0.0])
    }

    pub fn final_coherence(&self) -> C {
        self.coherence.last().copied().unwrap_or_default()
    }

    /// Peak second-excited-state population.
    pub fn max_leakage(&self) -> f64 {
        self.populations.iter().map(|p| p[2]).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "sx", "sy", "sz", "re_sm", "im_sm"])?;
        for k in 0..self.len() {
            let b = self.bloch[k];
            let s = self.coherence[k];
            wtr.write_record(
                [self.times[k], b[0], b[1], b[2], s.re, s.im].map(|v| format!("{v:e}")),
            )?;
        }
        wtr.flush()?;
        Ok(())
    }

    fn push_two_level(&mut self, t: f64, s: C, z: f64) {
        self.times.push(t);
        self.bloch.push([2.0 * s.re, -2.0 * s.im, z]);
        self.populations.push([(1.0 - z) / 2.0, (1.0 + z) / 2.0, 0.0]);
        self.coherence.push(s);
    }

    fn push_three_level(&mut self, t: f64, rho: &Matrix3<C>) {
        let s = rho[(1, 0)];
        let (p0, p1, p2) = (rho[(0, 0)].re, rho[(1, 1)].re, rho[(2, 2)].re);
        self.times.push(t);
        self.bloch.push([2.0 * s.re, -2.0 * s.im, p1 - p0]);
        self.populations.push([p0, p1, p2]);
        self.coherence.push(s);
    }
}

/// Two-level state as `(⟨σ−⟩, ⟨σz⟩)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochState {
    pub sigma_minus: C,
    pub sigma_z: f64,
}

impl BlochState {
    pub fn new(sigma_minus: C, sigma_z: f64) -> Result<Self> {
        let r2 = 4.0 * sigma_minus.norm_sqr() + sigma_z * sigma_z;
        if !(r2 <= 1.0 + 1e-12) {
            return Err(invalid("state", "Bloch vector longer than 1"));
        }
        Ok(Self {
            sigma_minus,
            sigma_z,
        })
    }

    pub fn ground() -> Self {
        Self {
            sigma_minus: C::new(0.0, 0.0),
            sigma_z: -1.0,
        }
    }

    pub fn excited() -> Self {
        Self {
            sigma_minus: C::new(0.0, 0.0),
            sigma_z: 1.0,
        }
    }

    /// Three-level density matrix with the same populations and coherence.
    pub fn to_density(&self) -> Matrix3<C> {
        let mut rho = Matrix3::zeros();
        rho[(0, 0)] = C::new((1.0 - self.sigma_z) / 2.0, 0.0);
        rho[(1, 1)] = C::new((1.0 + self.sigma_z) / 2.0, 0.0);
        rho[(1, 0)] = self.sigma_minus;
        rho[(0, 1)] = self.sigma_minus.conj();
        rho
    }
}

/// Coupling and damping used by the integrators, all in Hz.
///
/// `coupling` converts field amplitude into Rabi rate and is normally Γr;
/// keeping it separate from the damping rates allows closed-system runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitModel {
    pub coupling: f64,
    pub gamma_1: f64,
    pub gamma_2: f64,
}

impl QubitModel {
    pub fn new(rates: &RateSet) -> Self {
        Self {
            coupling: rates.gamma_r,
            gamma_1: rates.gamma_1,
            gamma_2: rates.gamma_2,
        }
    }

    /// Drive coupling `gamma_r` with relaxation and dephasing switched off.
    pub fn closed(gamma_r: f64) -> Self {
        Self {
            coupling: gamma_r,
            gamma_1: 0.0,
            gamma_2: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.coupling >= 0.0 && self.gamma_1 >= 0.0 && self.gamma_2 >= 0.0) {
            return Err(invalid("rates", "must be >= 0"));
        }
        if self.gamma_2 < self.gamma_1 / 2.0 * (1.0 - 1e-12) {
            return Err(invalid("gamma_2", "must be >= gamma_1/2"));
        }
        Ok(())
    }

    fn rabi_samples(&self, drive: &ComplexEnvelope) -> Vec<C> {
        drive
            .samples
            .iter()
            .map(|a| rabi_from_field(*a, self.coupling))
            .collect()
    }

    /// Enforces `dt ≤ 1/(50·max(|Ω|, Γ1, |Δ|))` in angular units and returns
    /// the number of RK4 sub-steps per drive sample.
    fn substeps(&self, omega: &[C], detuning: f64, dt: f64, drive_dt: f64, extra_rate: f64) -> Result<usize> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", "must be > 0"));
        }
        let omega_max = omega.iter().map(|w| w.norm()).fold(0.0, f64::max);
        let fastest = omega_max
            .max(TWO_PI * self.gamma_1)
            .max(TWO_PI * detuning.abs());
        if fastest > 0.0 {
            let limit = 1.0 / (50.0 * fastest);
            if dt > limit * (1.0 + 1e-12) {
                return Err(Error::StepSize { dt, suggested: limit });
            }
        }
        let mut h = dt.min(drive_dt);
        if extra_rate > 0.0 {
            h = h.min(0.5 / extra_rate);
        }
        Ok((drive_dt / h).ceil().max(1.0) as usize)
    }

    /// Two-level Bloch equations from `initial`, sampled on the drive grid.
    pub fn bloch(&self, initial: BlochState, drive: &ComplexEnvelope, detuning: f64, dt: f64) -> Result<QubitTrajectory> {
        self.validate()?;
        let omega = self.rabi_samples(drive);
        let n_sub = self.substeps(&omega, detuning, dt, drive.dt, 0.0)?;
        let h = drive.dt / n_sub as f64;
        let delta = TWO_PI * detuning;
        let g1 = TWO_PI * self.gamma_1;
        let g2 = TWO_PI * self.gamma_2;

        let rhs = |w: C, s: C, z: f64| -> (C, f64) {
            let ds = -I * delta * s + I * w * 0.5 * z - g2 * s;
            let dz = -2.0 * (w.conj() * s).im - g1 * (z + 1.0);
            (ds, dz)
        };

        let mut traj = QubitTrajectory::with_capacity(drive.len(), 2);
        let (mut s, mut z) = (initial.sigma_minus, initial.sigma_z);
        traj.push_two_level(0.0, s, z);
        for k in 1..drive.len() {
            let (w0, w1) = (omega[k - 1], omega[k]);
            for j in 0..n_sub {
                let f0 = j as f64 / n_sub as f64;
                let f1 = (j as f64 + 0.5) / n_sub as f64;
                let f2 = (j as f64 + 1.0) / n_sub as f64;
                let wa = w0 + (w1 - w0) * f0;
                let wb = w0 + (w1 - w0) * f1;
                let wc = w0 + (w1 - w0) * f2;
                let (k1s, k1z) = rhs(wa, s, z);
                let (k2s, k2z) = rhs(wb, s + k1s * (h / 2.0), z + k1z * h / 2.0);
                let (k3s, k3z) = rhs(wb, s + k2s * (h / 2.0), z + k2z * h / 2.0);
                let (k4s, k4z) = rhs(wc, s + k3s * h, z + k3z * h);
                s += (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (h / 6.0);
                z += (k1z + 2.0 * k2z + 2.0 * k3z + k4z) * h / 6.0;
            }
            traj.push_two_level(drive.time(k), s, z);
        }
        Ok(traj)
    }

    /// Three-level master equation with ladder operator
    /// `b = |0⟩⟨1| + √2|1⟩⟨2|`, relaxation `√Γ1·b` and dephasing `√(2Γφ)·n`.
    /// The sub-step is shortened automatically so the second level's
    /// rotating-frame energy stays resolved; `anharm` does not enter the
    /// user step check.
    pub fn three_level(
        &self,
        initial: &Matrix3<C>,
        drive: &ComplexEnvelope,
        detuning: f64,
        anharm: f64,
        dt: f64,
    ) -> Result<QubitTrajectory> {
        self.validate()?;
        if !(anharm > 0.0 && anharm.is_finite()) {
            return Err(invalid("anharm", "must be > 0"));
        }
        let tr = initial.trace();
        if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
            return Err(invalid("initial", "density matrix must have unit trace"));
        }
        let omega = self.rabi_samples(drive);
        let delta = TWO_PI * detuning;
        let e2 = 2.0 * delta - TWO_PI * anharm;
        let n_sub = self.substeps(&omega, detuning, dt, drive.dt, e2.abs())?;
        let h = drive.dt / n_sub as f64;
        let g1 = TWO_PI * self.gamma_1;
        let gphi = (TWO_PI * (self.gamma_2 - self.gamma_1 / 2.0)).max(0.0);

        let sq2 = std::f64::consts::SQRT_2;
        let mut b = Matrix3::<C>::zeros();
        b[(0, 1)] = C::new(1.0, 0.0);
        b[(1, 2)] = C::new(sq2, 0.0);
        let bd = b.adjoint();
        let btb = bd * b;
        let energies = [0.0, delta, e2];
        let n_diag = [0.0, 1.0, 2.0];

        let rhs = |w: C, rho: &Matrix3<C>| -> Matrix3<C> {
            let mut hm = Matrix3::<C>::zeros();
            for i in 0..3 {
                hm[(i, i)] = C::new(energies[i], 0.0);
            }
            hm += bd * (w * 0.5) + b * (w.conj() * 0.5);
            let comm = hm * rho - rho * hm;
            let mut d = comm * (-I);
            d += (b * rho * bd - (btb * rho + rho * btb) * C::new(0.5, 0.0)) * C::new(g1, 0.0);
            if gphi > 0.0 {
                // D[√(2Γφ) n] acts elementwise: −Γφ (n_i − n_j)² ρ_ij
                for i in 0..3 {
                    for j in 0..3 {
                        let dn = n_diag[i] - n_diag[j];
                        d[(i, j)] -= rho[(i, j)] * (gphi * dn * dn);
                    }
                }
            }
            d
        };

        let mut traj = QubitTrajectory::with_capacity(drive.len(), 3);
        let mut rho = *initial;
        traj.push_three_level(0.0, &rho);
        for k in 1..drive.len() {
            let (w0, w1) = (omega[k - 1], omega[k]);
            for j in 0..n_sub {
                let f0 = j as f64 / n_sub as f64;
                let f1 = (j as f64 + 0.5) / n_sub as f64;
                let f2 = (j as f64 + 1.0) / n_sub as f64;
                let wa = w0 + (w1 - w0) * f0;
                let wb = w0 + (w1 - w0) * f1;
                let wc = w0 + (w1 - w0) * f2;
                let k1 = rhs(wa, &rho);
                let k2 = rhs(wb, &(rho + k1 * C::new(h / 2.0, 0.0)));
                let k3 = rhs(wb, &(rho + k2 * C::new(h / 2.0, 0.0)));
                let k4 = rhs(wc, &(rho + k3 * C::new(h, 0.0)));
                rho += (k1 + k2 * C::new(2.0, 0.0) + k3 * C::new(2.0, 0.0) + k4) * C::new(h / 6.0, 0.0);
            }
            // keep exact Hermiticity against round-off
            rho = (rho + rho.adjoint()) * C::new(0.5, 0.0);
            traj.push_three_level(drive.time(k), &rho);
        }
        Ok(traj)
    }
}

/// Two-level evolution from the ground state.
pub fn simulate_bloch(drive: &ComplexEnvelope, detuning: f64, rates: &RateSet, dt: f64) -> Result<QubitTrajectory> {
    QubitModel::new(rates).bloch(BlochState::ground(), drive, detuning, dt)
}

/// Three-level evolution from the ground state; `anharm` is α/2π in Hz.
pub fn simulate_three_level(
    drive: &ComplexEnvelope,
    detuning: f64,
    anharm: f64,
    rates: &RateSet,
    dt: f64,
) -> Result<QubitTrajectory> {
    QubitModel::new(rates).three_level(&BlochState::ground().to_density(), drive, detuning, anharm, dt)
}

/// Parameters of the damped resonant Rabi oscillation. Rates and frequencies
/// are in Hz; `b1 = B1/Ωm` and `b2 = Γs/Ωm` are dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiParams {
    pub omega: f64,
    pub gamma_s: f64,
    pub omega_m: f64,
    pub b1: f64,
    pub b2: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl RabiParams {
    /// Derive all quantities for Rabi rate `omega` (Ω/2π, Hz).
    pub fn new(omega: f64, rates: &RateSet) -> Result<Self> {
        let (g1, g2) = (rates.gamma_1, rates.gamma_2);
        let arg = omega * omega - (g1 - g2).powi(2) / 4.0;
        if !(arg > 0.0) {
            return Err(Error::Domain(format!(
                "Rabi rate {omega:e} Hz is overdamped for |Γ1 − Γ2|/2 = {:e} Hz",
                (g1 - g2).abs() / 2.0
            )));
        }
        let omega_m = arg.sqrt();
        let gamma_s = (g1 + g2) / 2.0;
        let big_b1 = omega_m - (g1 * g1 - g2 * g2) / (4.0 * omega_m);
        let b2 = gamma_s / omega_m;
        Ok(Self {
            omega,
            gamma_s,
            omega_m,
            b1: big_b1 / omega_m,
            b2,
            theta1: g1.atan2(big_b1),
            theta2: 1.0f64.atan2(b2),
        })
    }

    pub fn theta_sum(&self) -> f64 {
        self.theta1 + self.theta2
    }
}

/// Closed-form resonant `(⟨σy⟩, ⟨σz⟩)` at time `tau` starting from the ground
/// state.
pub fn rabi_analytic(tau: f64, rabi: &RabiParams, rates: &RateSet) -> Result<(f64, f64)> {
    if !(rabi.omega_m > 0.0) {
        return Err(Error::Domain("modified Rabi frequency must be real and > 0".into()));
    }
    let w = TWO_PI * rabi.omega;
    let wm = TWO_PI * rabi.omega_m;
    let g1 = TWO_PI * rates.gamma_1;
    let g2 = TWO_PI * rates.gamma_2;
    let gs = TWO_PI * rabi.gamma_s;
    let big_b1 = rabi.b1 * wm;
    let d = w * w + g1 * g2;
    let decay = (-gs * tau).exp();
    let sy = w / d * (g1 + decay * (g1 * g1 + big_b1 * big_b1).sqrt() * (wm * tau - rabi.theta1).sin());
    let sz = (-g1 * g2 - w * w * decay * (1.0 + rabi.b2 * rabi.b2).sqrt() * (wm * tau + rabi.theta2).sin()) / d;
    Ok((sy, sz))
}

/// Stationary `⟨σ−⟩` under constant drive `omega` (Ω/2π) at `detuning`.
pub fn steady_state_sigma_minus(omega: f64, detuning: f64, rates: &RateSet) -> C {
    let w = TWO_PI * omega;
    let d = TWO_PI * detuning;
    let g1 = TWO_PI * rates.gamma_1;
    let g2 = TWO_PI * rates.gamma_2;
    let saturation = if w == 0.0 {
        0.0
    } else if g1 > 0.0 {
        w * w * g2 / g1
    } else {
        return C::new(0.0, 0.0);
    };
    let den = d * d + g2 * g2 + saturation;
    if den == 0.0 {
        return C::new(0.0, 0.0);
    }
    -(w / 2.0) * C::new(d, g2) / den
}

/// Result of fitting damped in-phase amplitude and power oscillations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiFit {
    pub gamma_s: f64,
    pub gamma_s_err: f64,
    pub omega_m: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta_sum_err: f64,
    pub converged: bool,
}

impl RabiFit {
    pub fn theta_sum(&self) -> f64 {
        self.theta1 + self.theta2
    }
}

/// Joint fit of `I(τ) = a_I + c_I·e^{−Γs τ}·sin(Ωm τ − θ1)` and
/// `P(τ) = a_P − c_P·e^{−Γs τ}·sin(Ωm τ + θ2)` with shared `Γs` and `Ωm`.
///
/// `I` tracks ⟨σy⟩ and `P` tracks 1 + ⟨σz⟩ up to unknown gains and offsets.
/// `omega_m_guess` (Hz) seeds the oscillation frequency.
pub fn fit_rabi_oscillation(taus: &[f64], i_sig: &[f64], p_sig: &[f64], omega_m_guess: f64) -> Result<RabiFit> {
    let n = taus.len();
    if i_sig.len() != n || p_sig.len() != n {
        return Err(Error::Format("tau, I and P must have equal lengths".into()));
    }
    if n < 10 {
        return Err(Error::InsufficientData(format!("{n} points")));
    }
    let span = taus[n - 1] - taus[0];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let amp = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).abs()).fold(0.0, f64::max)
    };
    let tail = n * 3 / 4;
    let (ai, ap) = (mean(&i_sig[tail..]), mean(&p_sig[tail..]));
    let (ci, cp) = (amp(i_sig).max(1e-300), amp(p_sig).max(1e-300));

    let model = |p: &[f64], t: f64| -> (f64, f64) {
        let e = (-TWO_PI * p[4] * t).exp();
        let ph = TWO_PI * p[5] * t;
        (p[0] + p[1] * e * (ph - p[6]).sin(), p[2] - p[3] * e * (ph + p[7]).sin())
    };
    let resid = |p: &[f64]| -> Vec<f64> {
        let mut r = Vec::with_capacity(2 * n);
        for k in 0..n {
            let (mi, mp) = model(p, taus[k]);
            r.push((mi - i_sig[k]) / ci);
            r.push((mp - p_sig[k]) / cp);
        }
        r
    };
    let scales = [ci, ci, cp, cp, 1.0 / span, omega_m_guess.abs().max(1.0 / span), 1.0, 1.0];

    let mut best: Option<crate::optimize::LmResult> = None;
    for decay_cycles in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let p0 = [ai, ci, ap, cp, decay_cycles / span, omega_m_guess, 0.1, 1.4];
        let r = levenberg_marquardt(&resid, &p0, &scales, LmOptions::default());
        if best.as_ref().is_none_or(|b| r.ssr < b.ssr) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    let p = &best.params;
    let se = best.std_errors().unwrap_or_else(|| vec![f64::NAN; 8]);
    let sum_err = best
        .covariance
        .as_ref()
        .map(|c| (c[(6, 6)] + c[(7, 7)] + 2.0 * c[(6, 7)]).max(0.0).sqrt())
        .unwrap_or(f64::NAN);
    // Negative amplitudes are equivalent to a phase shift of π.
    let (mut th1, mut th2) = (p[6], p[7]);
    if p[1] < 0.0 {
        th1 += std::f64::consts::PI;
    }
    if p[3] < 0.0 {
        th2 += std::f64::consts::PI;
    }
    let wrap = |x: f64| {
        let y = x.rem_euclid(TWO_PI);
        if y > std::f64::consts::PI {
            y - TWO_PI
        } else {
            y
        }
    };
    Ok(RabiFit {
        gamma_s: p[4],
        gamma_s_err: se[4],
        omega_m: p[5].abs(),
        theta1: wrap(th1),
        theta2: wrap(th2),
        theta_sum_err: sum_err,
        converged: best.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulses::{default_sigma, field_from_rabi, gaussian_pulse};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn constant_drive(omega_hz: f64, gamma_r: f64, t: f64, dt: f64) -> ComplexEnvelope {
        let a = field_from_rabi(C::new(TWO_PI * omega_hz, 0.0), gamma_r);
        ComplexEnvelope::constant(a, (t / dt).round() as usize + 1, dt).unwrap()
    }

    #[test]
    fn free_decay_from_excited() {
        let rates = RateSet::table1();
        let drive = ComplexEnvelope::zeros(5001, 1e-9).unwrap();
        let tr = QubitModel::new(&rates).bloch(BlochState::excited(), &drive, 0.0, 1e-9).unwrap();
        for k in (0..tr.len()).step_by(250) {
            let expect = -1.0 + 2.0 * (-TWO_PI * rates.gamma_1 * tr.times[k]).exp();
            assert!((tr.bloch[k][2] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn bloch_matches_closed_form() {
        let rates = RateSet::table1();
        for mult in [2.0, 5.0, 10.0] {
            let omega = mult * rates.gamma_1;
            let rp = RabiParams::new(omega, &rates).unwrap();
            let drive = constant_drive(omega, rates.gamma_r, 6e-6, 0.5e-9);
            let tr = simulate_bloch(&drive, 0.0, &rates, 0.5e-9).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..tr.len() {
                let (sy, sz) = rabi_analytic(tr.times[k], &rp, &rates).unwrap();
                worst = worst.max((tr.bloch[k][1] - sy).abs()).max((tr.bloch[k][2] - sz).abs());
            }
            assert!(worst < 1e-3, "Ω = {mult}Γ1: deviation {worst}");
        }
    }

    #[test]
    fn closed_form_limits() {
        let rates = RateSet::table1();
        let rp = RabiParams::new(3e6, &rates).unwrap();
        let (sy, sz) = rabi_analytic(0.0, &rp, &rates).unwrap();
        assert!(sy.abs() < 1e-12);
        assert!((sz + 1.0).abs() < 1e-12);
        let (w, g1, g2) = (TWO_PI * 3e6, TWO_PI * rates.gamma_1, TWO_PI * rates.gamma_2);
        let d = w * w + g1 * g2;
        let (sy, sz) = rabi_analytic(1e-3, &rp, &rates).unwrap();
        assert_relative_eq!(sy, w * g1 / d, max_relative = 1e-9);
        assert_relative_eq!(sz, -g1 * g2 / d, max_relative = 1e-9);
    }

    #[test]
    fn theta_sum_near_quarter_turn() {
        let rates = RateSet::table1();
        for mult in [10.0, 20.0, 100.0] {
            let rp = RabiParams::new(mult * rates.gamma_1, &rates).unwrap();
            let s = rp.theta_sum() / PI;
            assert!((0.49..=0.51).contains(&s), "{s}");
            assert!((rp.b2 - 1.0 / rp.theta2.tan()).abs() < 1e-12);
        }
    }

    #[test]
    fn overdamped_is_domain_error() {
        let rates = RateSet::from_decay(100e3, 100e3, 400e3).unwrap();
        assert!(matches!(RabiParams::new(10e3, &rates), Err(Error::Domain(_))));
    }

    #[test]
    fn steady_state_linear_response() {
        let rates = RateSet::table1();
        let w = 1.0;
        let s = steady_state_sigma_minus(w, 0.0, &rates);
        let lin = -I * (TWO_PI * w) / (2.0 * TWO_PI * rates.gamma_2);
        assert!((s - lin).norm() < 1e-9 * lin.norm());
    }

    #[test]
    fn steady_state_matches_long_simulation() {
        let rates = RateSet::table1();
        for (omega, det) in [(200e3, 0.0), (500e3, 300e3), (1e6, -150e3)] {
            let drive = constant_drive(omega, rates.gamma_r, 30e-6, 2e-9);
            let tr = simulate_bloch(&drive, det, &rates, 2e-9).unwrap();
            let ss = steady_state_sigma_minus(omega, det, &rates);
            assert!((tr.final_coherence() - ss).norm() < 1e-4);
        }
    }

    #[test]
    fn steady_coherence_peaks_at_sqrt_g1g2() {
        let rates = RateSet::table1();
        let grid: Vec<f64> = (1..4000).map(|k| k as f64 * 250.0).collect();
        let best = grid
            .iter()
            .copied()
            .max_by(|a, b| {
                steady_state_sigma_minus(*a, 0.0, &rates)
                    .norm()
                    .total_cmp(&steady_state_sigma_minus(*b, 0.0, &rates).norm())
            })
            .unwrap();
        let expect = (rates.gamma_1 * rates.gamma_2).sqrt();
        assert!((best - expect).abs() <= 250.0);
    }

    #[test]
    fn step_size_error_suggests_dt() {
        let rates = RateSet::table1();
        let drive = constant_drive(10e6, rates.gamma_r, 1e-6, 1e-9);
        match simulate_bloch(&drive, 0.0, &rates, 1e-9) {
            Err(Error::StepSize { suggested, .. }) => {
                assert_relative_eq!(suggested, 1.0 / (50.0 * TWO_PI * 10e6), max_relative = 1e-9);
                assert!(simulate_bloch(&drive, 0.0, &rates, suggested).is_ok());
            }
            other => panic!("expected step-size error, got {other:?}"),
        }
    }

    #[test]
    fn three_level_decouples_at_large_anharmonicity() {
        let rates = RateSet::table1();
        let p = gaussian_pulse(50e-9, default_sigma(50e-9), PI, 0.0, 0.1e-9, rates.gamma_r).unwrap();
        let two = simulate_bloch(&p, 0.0, &rates, 0.1e-9).unwrap();
        let three = simulate_three_level(&p, 0.0, 1e12, &rates, 0.1e-9).unwrap();
        for k in 0..two.len() {
            for c in 0..3 {
                assert!((two.bloch[k][c] - three.bloch[k][c]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn three_level_preserves_trace() {
        let rates = RateSet::from_decay(270e3, 376e3, 250e3).unwrap();
        let p = gaussian_pulse(20e-9, default_sigma(20e-9), PI, 0.0, 0.1e-9, rates.gamma_r).unwrap();
        let tr = simulate_three_level(&p.padded(200), 5e6, 251e6, &rates, 0.05e-9).unwrap();
        for pop in &tr.populations {
            assert!((pop.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!(pop.iter().all(|&x| (-1e-9..=1.0 + 1e-9).contains(&x)));
        }
        assert!(tr.max_leakage() > 0.0);
    }

    #[test]
    fn three_level_pi_pulse_population() {
        let rates = RateSet::table1();
        let p = gaussian_pulse(50e-9, default_sigma(50e-9), PI, 0.0, 0.1e-9, rates.gamma_r).unwrap();
        let two = simulate_bloch(&p, 0.0, &rates, 0.1e-9).unwrap();
        assert!(two.final_populations()[1] >= 0.9);
        let three = simulate_three_level(&p, 0.0, 251e6, &rates, 0.1e-9).unwrap();
        let p1 = three.final_populations()[1];
        assert!(p1 > 0.9 && p1 < 0.97, "{p1}");
    }

    #[test]
    fn halving_step_converges() {
        let rates = RateSet::table1();
        let p = gaussian_pulse(50e-9, default_sigma(50e-9), PI / 2.0, 0.0, 0.2e-9, rates.gamma_r).unwrap();
        let a = simulate_three_level(&p, 0.0, 251e6, &rates, 0.2e-9).unwrap();
        let b = simulate_three_level(&p, 0.0, 251e6, &rates, 0.1e-9).unwrap();
        for k in 0..a.len() {
            for c in 0..3 {
                assert!((a.populations[k][c] - b.populations[k][c]).abs() < 1e-5);
            }
            assert!((a.coherence[k] - b.coherence[k]).norm() < 1e-5);
        }
    }

    #[test]
    fn rabi_fit_recovers_parameters() {
        let rates = RateSet::table1();
        let omega = 5e6;
        let rp = RabiParams::new(omega, &rates).unwrap();
        let taus: Vec<f64> = (0..1000).map(|k| k as f64 * 5e-9).collect();
        let (i_sig, p_sig): (Vec<f64>, Vec<f64>) = taus
            .iter()
            .map(|&t| {
                let (sy, sz) = rabi_analytic(t, &rp, &rates).unwrap();
                (0.7 * sy + 0.01, 1.3 * (1.0 + sz) - 0.02)
            })
            .unzip();
        let fit = fit_rabi_oscillation(&taus, &i_sig, &p_sig, 4.9e6).unwrap();
        assert_relative_eq!(fit.gamma_s, rp.gamma_s, max_relative = 1e-6);
        assert_relative_eq!(fit.theta_sum(), rp.theta_sum(), max_relative = 1e-6);
    }

    #[test]
    fn trajectory_csv_columns() {
        let rates = RateSet::table1();
        let tr = simulate_bloch(&ComplexEnvelope::zeros(3, 1e-9).unwrap(), 0.0, &rates, 1e-9).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,sx,sy,sz,re_sm,im_sm"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn trajectories_stay_physical(
            area in 0.1f64..3.5,
            det in -20e6f64..20e6,
            g_phi in 0.0f64..300e3,
        ) {
            let rates = RateSet::new(270e3, 106e3, g_phi).unwrap();
            let p = gaussian_pulse(30e-9, 5e-9, area, 0.0, 0.05e-9, rates.gamma_r).unwrap().padded(100);
            let tr = simulate_bloch(&p, det, &rates, 0.05e-9).unwrap();
            for k in 0..tr.len() {
                let b = tr.bloch[k];
                prop_assert!((b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt() <= 1.0 + 1e-9);
                prop_assert!(tr.coherence[k].norm() <= 0.5 + 1e-9);
                let pop = tr.populations[k];
                prop_assert!(pop[0] >= -1e-9 && pop[1] >= -1e-9);
                prop_assert!((pop[0] + pop[1] - 1.0).abs() < 1e-12);
            }
        }
    }
}
