//! Scenario definition, loading and environment sampling.
//!
//! A scenario is a single TOML document. Only `duration_s`, `dt_s`,
//! `base_irradiance` and `base_temp` are required; every other field falls
//! back to the defaults of the 100 Wp panel, 42 Ah / 12 V battery, 20 W lamp
//! and 13 W setpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battery::BatteryParams;
use crate::controller::ControllerConfig;
use crate::pv::{EnvSample, PanelParams};

const REFERENCE_TOML: &str = include_str!("../../../scenarios/two-shading.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("time {t} s outside scenario range [0, {duration}] s")]
    OutOfRange { t: f64, duration: f64 },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation { path: path.into(), message: message.into() }
}

/// A base trace: either a constant or `[t, value]` breakpoints interpolated
/// linearly and held flat outside their span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Breakpoints(Vec<(f64, f64)>),
}

impl Profile {
    pub fn value_at(&self, t: f64) -> f64 {
        match self {
            Profile::Constant(v) => *v,
            Profile::Breakpoints(points) => {
                let idx = points.partition_point(|&(pt, _)| pt <= t);
                if idx == 0 {
                    return points[0].1;
                }
                if idx == points.len() {
                    return points[points.len() - 1].1;
                }
                let (t0, v0) = points[idx - 1];
                let (t1, v1) = points[idx];
                if t1 == t0 {
                    v1
                } else {
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    fn check(&self, path: &str, nonnegative: bool) -> Result<(), ScenarioError> {
        let values: Vec<f64> = match self {
            Profile::Constant(v) => vec![*v],
            Profile::Breakpoints(points) => {
                if points.is_empty() {
                    return Err(invalid(path, "breakpoint list is empty"));
                }
                for (i, pair) in points.windows(2).enumerate() {
                    if pair[1].0.is_nan() || pair[1].0 < pair[0].0 {
                        return Err(invalid(format!("{path}[{}]", i + 1), "breakpoints must be sorted by t"));
                    }
                }
                points.iter().map(|p| p.1).chain(points.iter().map(|p| p.0)).collect()
            }
        };
        for v in values {
            if !v.is_finite() {
                return Err(invalid(path, "values must be finite"));
            }
        }
        if nonnegative {
            let negative = match self {
                Profile::Constant(v) => *v < 0.0,
                Profile::Breakpoints(points) => points.iter().any(|p| p.1 < 0.0),
            };
            if negative {
                return Err(invalid(path, "irradiance must be >= 0"));
            }
        }
        Ok(())
    }
}

/// A temporary irradiance reduction. `depth` is the fraction of irradiance
/// that remains while the shade is fully on; edges ramp linearly over `ramp_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadingEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub depth: f64,
    #[serde(default)]
    pub ramp_s: f64,
}

impl ShadingEvent {
    /// Irradiance multiplier at time `t`.
    pub fn multiplier(&self, t: f64) -> f64 {
        if t <= self.start_s || t >= self.end_s {
            return 1.0;
        }
        let into = t - self.start_s;
        let left = self.end_s - t;
        let edge = into.min(left);
        if self.ramp_s > 0.0 && edge < self.ramp_s {
            1.0 - (1.0 - self.depth) * edge / self.ramp_s
        } else {
            self.depth
        }
    }

    fn check(&self, path: &str) -> Result<(), ScenarioError> {
        if !(self.start_s >= 0.0 && self.start_s < self.end_s && self.end_s.is_finite()) {
            return Err(invalid(path, format!("need 0 <= start_s < end_s, got {} / {}", self.start_s, self.end_s)));
        }
        if !(self.depth > 0.0 && self.depth <= 1.0) {
            return Err(invalid(format!("{path}.depth"), format!("must lie in (0, 1], got {}", self.depth)));
        }
        if !(self.ramp_s >= 0.0 && self.ramp_s <= (self.end_s - self.start_s) / 2.0) {
            return Err(invalid(
                format!("{path}.ramp_s"),
                format!("must lie in [0, (end_s - start_s) / 2], got {}", self.ramp_s),
            ));
        }
        Ok(())
    }
}

/// Which PV model produces the available power in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PvModelKind {
    /// Irradiance/temperature scaling of the rated power.
    #[default]
    Scaled,
    /// Single-diode curve followed by a perturb-and-observe tracker.
    SingleDiode,
}

fn default_seed() -> u64 {
    0
}

fn default_load() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_s: f64,
    pub dt_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Standard deviation of additive irradiance noise, W/m².
    #[serde(default)]
    pub irradiance_noise_sigma: f64,
    /// Constant-power load demand, W.
    #[serde(default = "default_load")]
    pub load_demand_w: f64,
    #[serde(default)]
    pub pv_model: PvModelKind,
    /// Apply each control decision one step late.
    #[serde(default)]
    pub actuation_delay: bool,
    pub base_irradiance: Profile,
    pub base_temp: Profile,
    #[serde(default)]
    pub shading: Vec<ShadingEvent>,
    #[serde(default)]
    pub panel: PanelParams,
    #[serde(default)]
    pub battery: BatteryParams,
    #[serde(default)]
    pub controller: ControllerConfig,
}

impl Scenario {
    /// A scenario with constant environment and default equipment.
    pub fn constant(duration_s: f64, dt_s: f64, irradiance: f64, temp: f64) -> Self {
        Self {
            duration_s,
            dt_s,
            seed: default_seed(),
            irradiance_noise_sigma: 0.0,
            load_demand_w: default_load(),
            pv_model: PvModelKind::Scaled,
            actuation_delay: false,
            base_irradiance: Profile::Constant(irradiance),
            base_temp: Profile::Constant(temp),
            shading: Vec::new(),
            panel: PanelParams::default(),
            battery: BatteryParams::default(),
            controller: ControllerConfig::default(),
        }
    }

    /// The shipped two-shading reference scenario.
    pub fn reference() -> Self {
        load_scenario(REFERENCE_TOML).expect("reference scenario is valid")
    }

    pub fn reference_toml() -> &'static str {
        REFERENCE_TOML
    }

    /// Number of simulation steps.
    pub fn steps(&self) -> usize {
        (self.duration_s / self.dt_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(invalid("duration_s", format!("must be > 0, got {}", self.duration_s)));
        }
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(invalid("dt_s", format!("must be > 0, got {}", self.dt_s)));
        }
        if self.dt_s > self.duration_s {
            return Err(invalid("dt_s", "must not exceed duration_s"));
        }
        if !(self.irradiance_noise_sigma.is_finite() && self.irradiance_noise_sigma >= 0.0) {
            return Err(invalid("irradiance_noise_sigma", "must be >= 0"));
        }
        if !(self.load_demand_w.is_finite() && self.load_demand_w >= 0.0) {
            return Err(invalid("load_demand_w", "must be >= 0"));
        }
        self.base_irradiance.check("base_irradiance", true)?;
        self.base_temp.check("base_temp", false)?;
        for (i, event) in self.shading.iter().enumerate() {
            event.check(&format!("shading[{i}]"))?;
        }
        for i in 0..self.shading.len() {
            for j in i + 1..self.shading.len() {
                let (a, b) = (&self.shading[i], &self.shading[j]);
                if a.start_s < b.end_s && b.start_s < a.end_s {
                    return Err(invalid(format!("shading[{i}]"), format!("shading[{i}] and shading[{j}] overlap")));
                }
            }
        }
        self.panel.check().map_err(|(f, m)| invalid(format!("panel.{f}"), m))?;
        self.battery.check().map_err(|(f, m)| invalid(format!("battery.{f}"), m))?;
        self.controller.check().map_err(|(f, m)| invalid(format!("controller.{f}"), m))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn shading_multiplier(&self, t: f64) -> f64 {
        self.shading.iter().map(|e| e.multiplier(t)).product()
    }

    fn noise(&self, t: f64) -> f64 {
        if self.irradiance_noise_sigma == 0.0 {
            return 0.0;
        }
        // Seeded per instant so a sample depends on (seed, t) only.
        let key = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t.to_bits();
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let z: f64 = StandardNormal.sample(&mut rng);
        self.irradiance_noise_sigma * z
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Environment at time `t`: interpolated base values, shading multipliers and
/// optional seeded noise.
pub fn sample_env(s: &Scenario, t: f64) -> Result<EnvSample, ScenarioError> {
    if !(0.0..=s.duration_s).contains(&t) {
        return Err(ScenarioError::OutOfRange { t, duration: s.duration_s });
    }
    let irradiance = s.base_irradiance.value_at(t) * s.shading_multiplier(t) + s.noise(t);
    Ok(EnvSample { t, irradiance: irradiance.max(0.0), ambient_temp: s.base_temp.value_at(t) })
}
