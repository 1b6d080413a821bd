//! Virtual printer fleet with per-device bias and noise.
//!
//! Mean weight is linear in the normalized parameters:
//! `W_exp · [a + b (f - 3000) / 2000 + c (LH - 0.4) / 0.2]`, plus Gaussian
//! noise with standard deviation `σ · W_exp` (scaled by the mode factor in
//! sequential mode), clamped at zero.
//!
//! Noise draws are counter-based: draw `k` of device `d` comes from its own
//! ChaCha stream at a fixed offset, so a device's sequence does not depend
//! on how calls for different devices interleave.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ParameterPoint, RepetitionMode};
use crate::error::{Error, Result};

const DEFAULT_MODE_FACTOR: f64 = 1.5;
/// Words reserved per draw within a device stream.
const WORDS_PER_DRAW: u128 = 1 << 20;

fn default_mode_factor() -> f64 {
    DEFAULT_MODE_FACTOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSimConfig {
    pub device_id: usize,
    pub bias: f64,
    pub flow_sensitivity: f64,
    pub lh_sensitivity: f64,
    /// Noise standard deviation as a fraction of the expected weight.
    pub noise_rel: f64,
    #[serde(default = "default_mode_factor")]
    pub mode_factor: f64,
}

impl DeviceSimConfig {
    pub fn new(device_id: usize, bias: f64, flow_sensitivity: f64, lh_sensitivity: f64, noise_rel: f64) -> Self {
        Self {
            device_id,
            bias,
            flow_sensitivity,
            lh_sensitivity,
            noise_rel,
            mode_factor: DEFAULT_MODE_FACTOR,
        }
    }

    /// Noise-free response as a multiple of the expected weight.
    pub fn relative_response(&self, point: ParameterPoint) -> f64 {
        self.bias
            + self.flow_sensitivity * (point.flow - 3000.0) / 2000.0
            + self.lh_sensitivity * (point.layer_height - 0.4) / 0.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSimConfig {
    pub devices: Vec<DeviceSimConfig>,
    /// Expected specimen weight in grams.
    pub expected_weight: f64,
    pub seed: u64,
}

/// Expected weight used by the presets, in grams.
pub const PRESET_EXPECTED_WEIGHT: f64 = 20.0;

impl FleetSimConfig {
    /// Three printers with distinct biases, slopes and noise levels.
    pub fn preset_heterogeneous(seed: u64) -> Self {
        let a = [0.95, 1.00, 1.08];
        let b = [0.02, 0.00, -0.03];
        let c = [0.01, 0.02, 0.03];
        let s = [0.005, 0.015, 0.03];
        Self {
            devices: (0..3).map(|d| DeviceSimConfig::new(d, a[d], b[d], c[d], s[d])).collect(),
            expected_weight: PRESET_EXPECTED_WEIGHT,
            seed,
        }
    }

    /// Three identical printers with low noise.
    pub fn preset_homogeneous(seed: u64) -> Self {
        Self {
            devices: (0..3).map(|d| DeviceSimConfig::new(d, 1.0, 0.01, 0.01, 0.003)).collect(),
            expected_weight: PRESET_EXPECTED_WEIGHT,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "heterogeneous" => Ok(Self::preset_heterogeneous(seed)),
            "homogeneous" => Ok(Self::preset_homogeneous(seed)),
            other => Err(Error::domain(format!(
                "unknown simulator preset '{other}' (expected heterogeneous or homogeneous)"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::domain("a simulated fleet needs at least one device"));
        }
        if !(self.expected_weight.is_finite() && self.expected_weight > 0.0) {
            return Err(Error::domain("expected weight must be positive"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.device_id != i {
                return Err(Error::domain("simulated device ids must be dense 0..n-1 in order"));
            }
            if !(d.bias > 0.0) || !(d.noise_rel >= 0.0) || !(d.mode_factor >= 0.0) {
                return Err(Error::domain(format!("device {i}: need bias > 0 and non-negative noise")));
            }
            if ![d.flow_sensitivity, d.lh_sensitivity].iter().all(|v| v.is_finite()) {
                return Err(Error::domain(format!("device {i}: sensitivities must be finite")));
            }
        }
        Ok(())
    }

    pub fn device(&self, device_id: usize) -> Result<&DeviceSimConfig> {
        self.devices
            .get(device_id)
            .ok_or_else(|| Error::domain(format!("device {device_id} not in simulated fleet of {}", self.len())))
    }

    /// Noise-free weight in grams.
    pub fn mean_weight(&self, device_id: usize, point: ParameterPoint) -> Result<f64> {
        Ok(self.expected_weight * self.device(device_id)?.relative_response(point))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Standard normal for draw `counter` of `device_id`.
fn noise_draw(seed: u64, device_id: usize, counter: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(device_id as u64);
    rng.set_word_pos(counter as u128 * WORDS_PER_DRAW);
    StandardNormal.sample(&mut rng)
}

/// Simulated weighing in grams. `counter` indexes the device's noise
/// stream.
pub fn simulate_measurement(
    fleet: &FleetSimConfig,
    device_id: usize,
    point: ParameterPoint,
    mode: RepetitionMode,
    counter: u64,
) -> Result<f64> {
    let dev = fleet.device(device_id)?;
    if !point.is_finite() {
        return Err(Error::domain("simulated point must be finite"));
    }
    let factor = match mode {
        RepetitionMode::Simultaneous => 1.0,
        RepetitionMode::Sequential => dev.mode_factor,
    };
    let sd = dev.noise_rel * factor * fleet.expected_weight;
    let mean = fleet.expected_weight * dev.relative_response(point);
    let eps = if sd > 0.0 { sd * noise_draw(fleet.seed, device_id, counter) } else { 0.0 };
    Ok((mean + eps).max(0.0))
}
