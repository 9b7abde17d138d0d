//! Dynamic power insertion (DPI) control logic.
//!
//! The controller compares available PV power against the setpoint and picks
//! one of three actions: absorb the surplus into the battery (`Charge`),
//! insert battery power to fill a deficit (`Insert`), or leave the battery idle
//! (`Bypass`). Each mode maps onto the three power switches of the converter:
//! switch 1 on the charge path, switch 2 feeding the load, switch 3 on the
//! insertion path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Setpoint the stabilized output must hold, W.
    pub p_set: f64,
    /// PWM register full-scale value.
    pub duty_scale: f64,
    pub duty_min: f64,
    pub duty_max: f64,
    /// Deadband half-width around `p_set`, W.
    pub hysteresis_w: f64,
    /// Integral gain, 1/s. Zero gives the purely proportional law.
    pub ki: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { p_set: 13.0, duty_scale: 300.0, duty_min: 0.0, duty_max: 300.0, hysteresis_w: 0.1, ki: 0.0 }
    }
}

impl ControllerConfig {
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if !(self.p_set.is_finite() && self.p_set > 0.0) {
            return Err(("p_set", format!("must be > 0, got {}", self.p_set)));
        }
        if !(self.hysteresis_w >= 0.0 && self.hysteresis_w < self.p_set) {
            return Err(("hysteresis_w", format!("must lie in [0, p_set), got {}", self.hysteresis_w)));
        }
        if !(self.duty_scale.is_finite() && self.duty_scale > 0.0) {
            return Err(("duty_scale", format!("must be > 0, got {}", self.duty_scale)));
        }
        if !(self.duty_min >= 0.0 && self.duty_max >= self.duty_min && self.duty_max <= self.duty_scale) {
            return Err((
                "duty_max",
                format!("need 0 <= duty_min <= duty_max <= duty_scale, got {} / {}", self.duty_min, self.duty_max),
            ));
        }
        if !(self.ki.is_finite() && self.ki >= 0.0) {
            return Err(("ki", format!("must be >= 0, got {}", self.ki)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Charge,
    Insert,
    Bypass,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Charge => "Charge",
            Mode::Insert => "Insert",
            Mode::Bypass => "Bypass",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Charge" => Ok(Mode::Charge),
            "Insert" => Ok(Mode::Insert),
            "Bypass" => Ok(Mode::Bypass),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Conduction state of the three power switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchStates {
    pub s_charge: bool,
    pub s_bypass: bool,
    pub s_insert: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub mode: Mode,
    /// Signed battery power target, W (positive = insert).
    pub p_batt_target: f64,
    pub duty: f64,
    pub switches: SwitchStates,
}

/// Integrator memory of the optional integral term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Integrator {
    /// Accumulated normalized error, s.
    pub accum: f64,
}

pub fn decide_mode(p_pv: f64, cfg: &ControllerConfig) -> Mode {
    if p_pv > cfg.p_set + cfg.hysteresis_w {
        Mode::Charge
    } else if p_pv < cfg.p_set - cfg.hysteresis_w {
        Mode::Insert
    } else {
        Mode::Bypass
    }
}

/// Battery power needed to hold the setpoint: the surplus is absorbed, the
/// deficit inserted, and nothing happens inside the deadband.
pub fn battery_power_target(p_pv: f64, cfg: &ControllerConfig) -> f64 {
    match decide_mode(p_pv, cfg) {
        Mode::Insert => cfg.p_set - p_pv,
        Mode::Charge => -(p_pv - cfg.p_set),
        Mode::Bypass => 0.0,
    }
}

/// PWM duty from the normalized load error, scaled to the register range.
///
/// The proportional term is `(p_set - p_load) / p_set * duty_scale`. With
/// `ki > 0` the integral of the same normalized error is added. The result is
/// saturated to `[duty_min, duty_max]`; while saturated the integrator does not
/// accumulate error that would push further into saturation.
pub fn duty_cycle(p_set: f64, p_load: f64, cfg: &ControllerConfig, integ: Integrator, dt: f64) -> (f64, Integrator) {
    let error = (p_set - p_load) / p_set;
    let proportional = error * cfg.duty_scale;
    if cfg.ki <= 0.0 {
        return (proportional.clamp(cfg.duty_min, cfg.duty_max), integ);
    }

    let candidate = integ.accum + error * dt;
    let raw = proportional + cfg.ki * candidate * cfg.duty_scale;
    let duty = raw.clamp(cfg.duty_min, cfg.duty_max);
    let winding_up = (raw > cfg.duty_max && error > 0.0) || (raw < cfg.duty_min && error < 0.0);
    let accum = if winding_up { integ.accum } else { candidate };
    (duty, Integrator { accum })
}

pub fn switch_states(mode: Mode) -> SwitchStates {
    match mode {
        Mode::Charge => SwitchStates { s_charge: true, s_bypass: true, s_insert: false },
        Mode::Insert => SwitchStates { s_charge: false, s_bypass: true, s_insert: true },
        Mode::Bypass => SwitchStates { s_charge: false, s_bypass: true, s_insert: false },
    }
}

/// One control period: mode, battery target, duty and switch pattern.
///
/// `p_load_measured` is the load power the PV alone would supply, which is
/// what the insertion loop has to make up.
pub fn control_step(
    p_pv: f64,
    p_load_measured: f64,
    cfg: &ControllerConfig,
    integ: &mut Integrator,
    dt: f64,
) -> ControlDecision {
    let mode = decide_mode(p_pv, cfg);
    let p_batt_target = battery_power_target(p_pv, cfg);
    let (duty, next) = duty_cycle(cfg.p_set, p_load_measured, cfg, *integ, dt);
    *integ = next;
    ControlDecision { mode, p_batt_target, duty, switches: switch_states(mode) }
}
