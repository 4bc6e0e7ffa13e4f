//! Experiment configuration: one file, TOML or JSON, with a block per subcommand.
//!
//! Every block is optional and falls back to the reference device. Fields left
//! out of a block take their defaults; unknown fields are rejected.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use photonsource::device::DeviceParams;
use photonsource::measurement::MeasurementConfig;
use photonsource::pulses::CancellationSetting;
use photonsource::spectroscopy::MismatchParams;
use photonsource::stability::StabilityConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub device: DeviceParams,
    pub measurement: MeasurementConfig,
    pub pulse: PulseConfig,
    pub sweep: SweepConfig,
    #[serde(default = "StabilityConfig::reference_device")]
    pub stability: StabilityConfig,
    pub tomography: TomographyConfig,
    pub rabi: RabiConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            device: DeviceParams::table1(),
            measurement: MeasurementConfig::default(),
            pulse: PulseConfig::default(),
            sweep: SweepConfig::default(),
            stability: StabilityConfig::reference_device(),
            tomography: TomographyConfig::default(),
            rabi: RabiConfig::default(),
        }
    }
}

/// Drive pulse and cancellation path used by `emit` and `tomography`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    /// Window length, s.
    pub duration: f64,
    /// Gaussian width, s. Defaults to a sixth of the window.
    pub sigma: Option<f64>,
    /// Pulse area in units of π.
    pub area_pi: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Qubit minus drive frequency, Hz.
    pub detuning: f64,
    /// Flux bias of the emitter, in the device's flux convention.
    pub flux: f64,
    /// Free-decay time recorded after the pulse, s.
    pub tail: f64,
    /// Amplitude ratio from the coupler input port to the qubit.
    pub coupler_attenuation: f64,
    /// Cancellation setting applied as-is.
    pub cancellation: CancellationSetting,
    /// Starting point for the automatic calibration.
    pub calibration_start: CancellationSetting,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self {
            duration: 50e-9,
            sigma: None,
            area_pi: 1.0,
            dt: 0.1e-9,
            detuning: 0.0,
            flux: 0.0,
            tail: 6e-6,
            coupler_attenuation: 0.1,
            cancellation: CancellationSetting {
                amp_scale: 1.021,
                ..CancellationSetting::ideal()
            },
            calibration_start: CancellationSetting {
                amp_scale: 0.9,
                phase: PI + 0.1,
                delay: 2e-9,
            },
        }
    }
}

/// Spectroscopy sweep: one reflection trace per qubit frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Qubit frequencies to bias to, Hz.
    pub frequencies: Vec<f64>,
    pub n_points: usize,
    /// Probe span in units of the local Γ2.
    pub span_linewidths: f64,
    /// Complex noise per point, absolute.
    pub noise: f64,
    pub mismatch: MismatchParams,
    /// Largest delay tried by the phase-curve fit, s. Defaults to just under
    /// the alias period 1/(2·Δf) of the frequency grid.
    pub tau_max: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            frequencies: (0..13).map(|k| 4.9e9 + 50e6 * k as f64).collect(),
            n_points: 201,
            span_linewidths: 32.0,
            noise: 0.01,
            mismatch: MismatchParams::lossless_mismatch(0.14, 0.97, 2e-9).expect("valid"),
            tau_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drive {
    Pi,
    HalfPi,
    Vacuum,
}

impl Drive {
    pub fn label(self) -> &'static str {
        match self {
            Drive::Pi => "pi",
            Drive::HalfPi => "half_pi",
            Drive::Vacuum => "vacuum",
        }
    }

    pub fn area(self) -> Option<f64> {
        match self {
            Drive::Pi => Some(PI),
            Drive::HalfPi => Some(PI / 2.0),
            Drive::Vacuum => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomographyConfig {
    pub drives: Vec<Drive>,
    /// Half-width of the Wigner grid.
    pub wigner_extent: f64,
    pub wigner_points: usize,
    pub mle_restarts: usize,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            drives: vec![Drive::Pi, Drive::HalfPi],
            wigner_extent: 1.4,
            wigner_points: 41,
            mle_restarts: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RabiConfig {
    /// Rabi rates Ω/2π, Hz.
    pub omegas: Vec<f64>,
    pub t_max: f64,
    pub dt: f64,
    /// Keep every n-th sample of the trajectory.
    pub decimate: usize,
    /// Gaussian noise added to both quadratures.
    pub noise: f64,
}

impl Default for RabiConfig {
    fn default() -> Self {
        Self {
            omegas: vec![1e6, 5e6, 10e6],
            t_max: 5e-6,
            dt: 0.25e-9,
            decimate: 10,
            noise: 0.005,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        Ok(cfg)
    }

    /// Field-level checks of every block.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.device.validate().context("device")?;
        self.measurement.validate().context("measurement")?;
        self.stability.validate().context("stability")?;

        let p = &self.pulse;
        let positive = |name: &str, x: f64| -> anyhow::Result<()> {
            if !(x > 0.0 && x.is_finite()) {
                bail!("{name} must be > 0, got {x}");
            }
            Ok(())
        };
        positive("pulse.duration", p.duration)?;
        positive("pulse.area_pi", p.area_pi)?;
        positive("pulse.dt", p.dt)?;
        positive("pulse.tail", p.tail)?;
        positive("pulse.coupler_attenuation", p.coupler_attenuation)?;
        if let Some(s) = p.sigma {
            positive("pulse.sigma", s)?;
        }
        if !p.detuning.is_finite() || !p.flux.is_finite() {
            bail!("pulse.detuning and pulse.flux must be finite");
        }

        let s = &self.sweep;
        if s.frequencies.is_empty() {
            bail!("sweep.frequencies must not be empty");
        }
        for &f in &s.frequencies {
            if !(f > 0.0 && f <= self.device.f01_max) {
                bail!("sweep.frequencies: {f} Hz is outside (0, f01_max]");
            }
        }
        if s.n_points < 50 {
            bail!("sweep.n_points must be >= 50, got {}", s.n_points);
        }
        positive("sweep.span_linewidths", s.span_linewidths)?;
        if !(s.noise >= 0.0 && s.noise.is_finite()) {
            bail!("sweep.noise must be >= 0");
        }
        if let Some(t) = s.tau_max {
            positive("sweep.tau_max", t)?;
        }

        let t = &self.tomography;
        if t.drives.is_empty() {
            bail!("tomography.drives must not be empty");
        }
        positive("tomography.wigner_extent", t.wigner_extent)?;
        if t.wigner_points < 2 {
            bail!("tomography.wigner_points must be >= 2");
        }
        if t.mle_restarts == 0 {
            bail!("tomography.mle_restarts must be >= 1");
        }

        let r = &self.rabi;
        if r.omegas.is_empty() {
            bail!("rabi.omegas must not be empty");
        }
        for &w in &r.omegas {
            positive("rabi.omegas", w)?;
        }
        positive("rabi.t_max", r.t_max)?;
        positive("rabi.dt", r.dt)?;
        if r.decimate == 0 {
            bail!("rabi.decimate must be >= 1");
        }
        if !(r.noise >= 0.0 && r.noise.is_finite()) {
            bail!("rabi.noise must be >= 0");
        }
        Ok(())
    }
}
