//! Device parameterization, flux tuning, decay-rate bookkeeping and the
//! intrinsic quantum-efficiency budget.
//!
//! Every rate and frequency is stored as an ordinary frequency in Hz
//! (i.e. the angular value divided by 2π). Factors of 2π only appear inside
//! formulas that need angular units.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Largest |Φ|/Φ0 accepted by the dispersion model.
pub const MAX_FLUX: f64 = 0.45;

/// How flux values passed to this module are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxConvention {
    /// Flux in units of the flux quantum Φ0 = h/2e.
    #[default]
    Phi0,
    /// Flux given as the SQUID phase 2πΦ/Φ0.
    Phase,
}

impl FluxConvention {
    pub fn to_phi0(self, phi: f64) -> f64 {
        match self {
            FluxConvention::Phi0 => phi,
            FluxConvention::Phase => phi / TWO_PI,
        }
    }

    pub fn from_phi0(self, phi0: f64) -> f64 {
        match self {
            FluxConvention::Phi0 => phi0,
            FluxConvention::Phase => phi0 * TWO_PI,
        }
    }
}

/// Static description of the qubit and the line it terminates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    /// Qubit frequency at zero flux, Hz.
    pub f01_max: f64,
    /// Anharmonicity α/2π, Hz (positive).
    pub anharm: f64,
    /// Radiative decay rate into the waveguide, Hz.
    pub gamma_r: f64,
    /// Non-radiative decay rate at the sweet spot, Hz.
    pub gamma_n_sweet: f64,
    /// Square root of the 1/f flux-noise amplitude, in Φ0.
    #[serde(rename = "flux_noise_sqrt_A")]
    pub flux_noise_sqrt_a: f64,
    /// Infrared cutoff of the 1/f spectrum, Hz.
    pub f_ir: f64,
    /// Waveguide impedance, Ω.
    pub z0: f64,
    #[serde(default)]
    pub phi0_convention: FluxConvention,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self::table1()
    }
}

impl DeviceParams {
    /// Parameters of the characterized device: α = 251 MHz, f01 = 5.510 GHz,
    /// Γr = 270 kHz, Γ2 = 188 kHz with Γφ = 0 at the sweet spot (so Γ1 = 376
    /// kHz and Γn = 106 kHz), A_Φ^1/2 = 2 μΦ0, f_IR = 5 mHz, Z0 = 50 Ω.
    pub fn table1() -> Self {
        Self {
            f01_max: 5.510e9,
            anharm: 0.251e9,
            gamma_r: 270e3,
            gamma_n_sweet: 106e3,
            flux_noise_sqrt_a: 2e-6,
            f_ir: 5e-3,
            z0: 50.0,
            phi0_convention: FluxConvention::Phi0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("f01_max", self.f01_max),
            ("anharm", self.anharm),
            ("gamma_r", self.gamma_r),
            ("gamma_n_sweet", self.gamma_n_sweet),
            ("flux_noise_sqrt_A", self.flux_noise_sqrt_a),
            ("f_ir", self.f_ir),
            ("z0", self.z0),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(invalid(name, format!("must be finite, got {v}")));
            }
        }
        if self.f01_max <= 0.0 {
            return Err(invalid("f01_max", "must be > 0"));
        }
        if self.anharm <= 0.0 {
            return Err(invalid("anharm", "must be > 0"));
        }
        if self.gamma_r < 0.0 {
            return Err(invalid("gamma_r", "must be >= 0"));
        }
        if self.gamma_n_sweet < 0.0 {
            return Err(invalid("gamma_n_sweet", "must be >= 0"));
        }
        if self.flux_noise_sqrt_a < 0.0 {
            return Err(invalid("flux_noise_sqrt_A", "must be >= 0"));
        }
        if !(self.f_ir > 0.0 && self.f_ir < self.gamma_r) {
            return Err(invalid("f_ir", "must satisfy 0 < f_ir < gamma_r"));
        }
        if self.z0 <= 0.0 {
            return Err(invalid("z0", "must be > 0"));
        }
        Ok(())
    }

    /// Parse from TOML or JSON text (keys are the field names, SI units).
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Load from a `.toml` or `.json` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }
}

fn checked_flux(phi: f64, params: &DeviceParams) -> Result<f64> {
    let x = params.phi0_convention.to_phi0(phi);
    if !x.is_finite() || x.abs() > MAX_FLUX {
        return Err(Error::Domain(format!(
            "flux {x} Φ0 outside [-{MAX_FLUX}, {MAX_FLUX}]"
        )));
    }
    Ok(x)
}

/// Qubit frequency (Hz) at flux `phi`, using the symmetric-SQUID transmon
/// dispersion `(f01_max + α)·sqrt|cos πΦ| − α`.
pub fn flux_to_frequency(phi: f64, params: &DeviceParams) -> Result<f64> {
    let x = checked_flux(phi, params)?;
    let plasma = params.f01_max + params.anharm;
    Ok(plasma * (PI * x).cos().abs().sqrt() - params.anharm)
}

/// Analytic ∂f01/∂Φ in Hz per Φ0 (always per Φ0, whatever the input convention).
pub fn flux_derivative(phi: f64, params: &DeviceParams) -> Result<f64> {
    let x = checked_flux(phi, params)?;
    let plasma = params.f01_max + params.anharm;
    let c = (PI * x).cos();
    // |Φ| <= 0.45 keeps cos strictly positive.
    Ok(-plasma * PI * (PI * x).sin() / (2.0 * c.sqrt()))
}

/// Inverse of [`flux_to_frequency`] on the non-negative flux branch, returned
/// in the params' flux convention.
pub fn frequency_to_flux(f: f64, params: &DeviceParams) -> Result<f64> {
    let plasma = params.f01_max + params.anharm;
    let r = (f + params.anharm) / plasma;
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Domain(format!("frequency {f} Hz not reachable")));
    }
    let x = (r * r).acos() / PI;
    if x > MAX_FLUX {
        return Err(Error::Domain(format!(
            "frequency {f} Hz requires flux {x} Φ0 > {MAX_FLUX}"
        )));
    }
    Ok(params.phi0_convention.from_phi0(x))
}

/// Decay and decoherence rates at one operating point, all in Hz.
///
/// Invariants: `gamma_1 = gamma_r + gamma_n`, `gamma_2 = gamma_1/2 + gamma_phi`,
/// everything non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub gamma_phi: f64,
    pub gamma_r: f64,
    pub gamma_n: f64,
}

impl RateSet {
    pub fn new(gamma_r: f64, gamma_n: f64, gamma_phi: f64) -> Result<Self> {
        for (name, v) in [
            ("gamma_r", gamma_r),
            ("gamma_n", gamma_n),
            ("gamma_phi", gamma_phi),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let gamma_1 = gamma_r + gamma_n;
        Ok(Self {
            gamma_1,
            gamma_2: gamma_1 / 2.0 + gamma_phi,
            gamma_phi,
            gamma_r,
            gamma_n,
        })
    }

    /// Build from measured Γr, Γ1 and Γ2.
    pub fn from_decay(gamma_r: f64, gamma_1: f64, gamma_2: f64) -> Result<Self> {
        let gamma_n = gamma_1 - gamma_r;
        let gamma_phi = gamma_2 - gamma_1 / 2.0;
        if gamma_n < 0.0 {
            return Err(invalid("gamma_1", "must be >= gamma_r"));
        }
        if gamma_phi < 0.0 {
            return Err(invalid("gamma_2", "must be >= gamma_1/2"));
        }
        Ok(Self {
            gamma_1,
            gamma_2,
            gamma_phi,
            gamma_r,
            gamma_n,
        })
    }

    /// Γr = 270 kHz, Γ2 = 188 kHz, Γφ = 0.
    pub fn table1() -> Self {
        Self::from_decay(270e3, 376e3, 188e3).expect("table values are consistent")
    }

    /// Same rates with all decoherence switched off.
    pub fn lossless() -> Self {
        Self {
            gamma_1: 0.0,
            gamma_2: 0.0,
            gamma_phi: 0.0,
            gamma_r: 0.0,
            gamma_n: 0.0,
        }
    }

    pub fn with_gamma_r(gamma_r: f64) -> Result<Self> {
        Self::new(gamma_r, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma_1,
            self.gamma_2,
            self.gamma_phi,
            self.gamma_r,
            self.gamma_n,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("rates", "all rates must be finite and >= 0"));
        }
        let tol = 1e-9 * self.gamma_1.max(self.gamma_2).max(1.0);
        if (self.gamma_1 - self.gamma_r - self.gamma_n).abs() > tol {
            return Err(invalid("gamma_1", "must equal gamma_r + gamma_n"));
        }
        if (self.gamma_2 - self.gamma_1 / 2.0 - self.gamma_phi).abs() > tol {
            return Err(invalid("gamma_2", "must equal gamma_1/2 + gamma_phi"));
        }
        Ok(())
    }
}

/// Non-radiative decay as a function of flux bias.
pub trait NonRadiativeModel: Send + Sync {
    fn gamma_n(&self, phi: f64, params: &DeviceParams) -> Result<f64>;
}

impl<F> NonRadiativeModel for F
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    fn gamma_n(&self, phi: f64, _params: &DeviceParams) -> Result<f64> {
        Ok(self(phi))
    }
}

/// Built-in Γn(Φ) models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaNModel {
    /// `gamma_n_sweet` everywhere.
    Constant,
    /// `gamma_n_sweet` at the sweet spot, falling linearly to zero at
    /// `width` Hz of detuning below `f01_max`.
    LinearRolloff { width: f64 },
}

impl Default for GammaNModel {
    fn default() -> Self {
        GammaNModel::LinearRolloff { width: 120e6 }
    }
}

impl NonRadiativeModel for GammaNModel {
    fn gamma_n(&self, phi: f64, params: &DeviceParams) -> Result<f64> {
        match *self {
            GammaNModel::Constant => Ok(params.gamma_n_sweet),
            GammaNModel::LinearRolloff { width } => {
                let detuning = params.f01_max - flux_to_frequency(phi, params)?;
                Ok(params.gamma_n_sweet * (1.0 - detuning / width).max(0.0))
            }
        }
    }
}

/// Pure dephasing (Hz) from 1/f flux noise S_Φ(f) = A_Φ/f, evaluated with
/// integration time `t_phase` (s):
/// Γφ = sqrt(A_Φ·|ln(2π f_IR t)|)·|∂ω01/∂Φ|.
pub fn flux_noise_dephasing(phi: f64, t_phase: f64, params: &DeviceParams) -> Result<f64> {
    if !(t_phase > 0.0 && t_phase.is_finite()) {
        return Err(invalid("t_phase", "must be > 0"));
    }
    let slope = flux_derivative(phi, params)?;
    let log = (TWO_PI * params.f_ir * t_phase).ln().abs();
    // angular 2π on ∂ω/∂Φ and on Γφ cancel
    Ok(params.flux_noise_sqrt_a * log.sqrt() * slope.abs())
}

pub fn rates_at_flux(
    phi: f64,
    t_phase: f64,
    params: &DeviceParams,
    gamma_n_model: &dyn NonRadiativeModel,
) -> Result<RateSet> {
    let gamma_phi = flux_noise_dephasing(phi, t_phase, params)?;
    let gamma_n = gamma_n_model.gamma_n(phi, params)?;
    RateSet::new(params.gamma_r, gamma_n, gamma_phi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DephasingTime {
    pub t: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve t = 1/(2π·mean Γφ(t)) over the given flux points by fixed-point
/// iteration (at most 50 steps, relative tolerance 1e-3).
///
/// When every point sits on the sweet spot Γφ vanishes for any t; the
/// radiative lifetime 1/(2πΓr) is returned instead.
pub fn self_consistent_dephasing_time(fluxes: &[f64], params: &DeviceParams) -> Result<DephasingTime> {
    if fluxes.is_empty() {
        return Err(Error::InsufficientData("no flux points".into()));
    }
    let fallback = 1.0 / (TWO_PI * params.gamma_r.max(params.f_ir * 10.0));
    let mut t = fallback;
    for it in 1..=50 {
        let mut sum = 0.0;
        for &phi in fluxes {
            sum += flux_noise_dephasing(phi, t, params)?;
        }
        let mean = sum / fluxes.len() as f64;
        if mean <= 0.0 {
            return Ok(DephasingTime {
                t: fallback,
                iterations: it,
                converged: true,
            });
        }
        let next = 1.0 / (TWO_PI * mean);
        if ((next - t) / t).abs() < 1e-3 {
            return Ok(DephasingTime {
                t: next,
                iterations: it,
                converged: true,
            });
        }
        t = next;
    }
    Ok(DephasingTime {
        t,
        iterations: 50,
        converged: false,
    })
}

/// Split of the coherence budget: η_q + η_p + η_n = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyBudget {
    pub eta_q: f64,
    pub eta_p: f64,
    pub eta_n: f64,
}

impl EfficiencyBudget {
    pub fn total(&self) -> f64 {
        self.eta_q + self.eta_p + self.eta_n
    }
}

pub fn efficiency_decomposition(rates: &RateSet) -> Result<EfficiencyBudget> {
    rates.validate()?;
    if rates.gamma_2 <= 0.0 {
        return Err(Error::Domain("gamma_2 must be > 0".into()));
    }
    let g2 = rates.gamma_2;
    Ok(EfficiencyBudget {
        eta_q: rates.gamma_r / (2.0 * g2),
        eta_p: rates.gamma_phi / g2,
        eta_n: rates.gamma_n / (2.0 * g2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub frequency: f64,
    pub flux: f64,
    pub rates: RateSet,
    pub budget: EfficiencyBudget,
}

/// Rates and efficiency budget across a set of qubit frequencies, with the
/// 1/f integration time solved self-consistently over the whole sweep.
pub fn efficiency_sweep(
    frequencies: &[f64],
    params: &DeviceParams,
    gamma_n_model: &dyn NonRadiativeModel,
) -> Result<(Vec<SweepPoint>, DephasingTime)> {
    let fluxes = frequencies
        .iter()
        .map(|&f| frequency_to_flux(f, params))
        .collect::<Result<Vec<_>>>()?;
    let tphase = self_consistent_dephasing_time(&fluxes, params)?;
    let points = frequencies
        .iter()
        .zip(&fluxes)
        .map(|(&frequency, &flux)| {
            let rates = rates_at_flux(flux, tphase.t, params, gamma_n_model)?;
            let budget = efficiency_decomposition(&rates)?;
            Ok(SweepPoint {
                frequency,
                flux,
                rates,
                budget,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((points, tphase))
}
