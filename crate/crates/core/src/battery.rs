//! Energy-reservoir model of the storage battery.
//!
//! Power is signed with positive meaning discharge (insertion into the load)
//! and negative meaning charge (absorption of PV surplus). Stored energy is
//! tracked in watt-seconds internally and exposed as a state-of-charge fraction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryParams {
    pub capacity_ah: f64,
    pub nominal_v: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// State of charge at the start of a run.
    pub initial_soc: f64,
    /// W, magnitude.
    pub p_charge_max: f64,
    /// W, magnitude.
    pub p_discharge_max: f64,
    /// W/s.
    pub ramp_limit: f64,
    pub eta_charge: f64,
    pub eta_discharge: f64,
}

impl Default for BatteryParams {
    /// 42 Ah / 12 V VRLA battery.
    fn default() -> Self {
        Self {
            capacity_ah: 42.0,
            nominal_v: 12.0,
            soc_min: 0.2,
            soc_max: 1.0,
            initial_soc: 0.8,
            p_charge_max: 50.0,
            p_discharge_max: 50.0,
            ramp_limit: 10.0,
            eta_charge: 0.95,
            eta_discharge: 0.95,
        }
    }
}

impl BatteryParams {
    pub fn capacity_wh(&self) -> f64 {
        self.capacity_ah * self.nominal_v
    }

    fn capacity_ws(&self) -> f64 {
        self.capacity_wh() * 3600.0
    }

    /// True when both power limits are zero, i.e. the battery cannot act.
    pub fn is_disabled(&self) -> bool {
        self.p_charge_max == 0.0 && self.p_discharge_max == 0.0
    }

    /// Lossless copy of these parameters.
    pub fn lossless(mut self) -> Self {
        self.eta_charge = 1.0;
        self.eta_discharge = 1.0;
        self
    }

    /// Checks the parameter invariants, returning the offending field name and
    /// a message on failure. Power limits of zero are accepted and disable the
    /// battery.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if !(self.capacity_ah.is_finite() && self.capacity_ah > 0.0) {
            return Err(("capacity_ah", format!("must be > 0, got {}", self.capacity_ah)));
        }
        if !(self.nominal_v.is_finite() && self.nominal_v > 0.0) {
            return Err(("nominal_v", format!("must be > 0, got {}", self.nominal_v)));
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err((
                "soc_min",
                format!("need 0 <= soc_min < soc_max <= 1, got {} / {}", self.soc_min, self.soc_max),
            ));
        }
        if !(self.soc_min..=self.soc_max).contains(&self.initial_soc) {
            return Err(("initial_soc", format!("must lie in [soc_min, soc_max], got {}", self.initial_soc)));
        }
        for (name, value) in [("p_charge_max", self.p_charge_max), ("p_discharge_max", self.p_discharge_max)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err((name, format!("must be >= 0, got {value}")));
            }
        }
        if self.ramp_limit.is_nan() || self.ramp_limit <= 0.0 {
            return Err(("ramp_limit", format!("must be > 0, got {}", self.ramp_limit)));
        }
        for (name, value) in [("eta_charge", self.eta_charge), ("eta_discharge", self.eta_discharge)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err((name, format!("must lie in (0, 1], got {value}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub soc: f64,
    /// Power of the previous step, W (positive = discharging).
    pub last_power: f64,
}

impl BatteryState {
    pub fn new(soc: f64) -> Self {
        Self { soc, last_power: 0.0 }
    }

    pub fn initial(params: &BatteryParams) -> Self {
        Self::new(params.initial_soc)
    }

    /// Stored energy, Wh.
    pub fn energy_wh(&self, params: &BatteryParams) -> f64 {
        self.soc * params.capacity_wh()
    }
}

pub fn soc_of(state: &BatteryState) -> f64 {
    state.soc
}

/// Set when the state-of-charge bound was the binding constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SocLimit {
    Depleted,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryStep {
    /// Power actually exchanged at the battery terminals, W.
    pub p_actual: f64,
    pub state: BatteryState,
    pub limit: Option<SocLimit>,
}

/// Largest terminal power `p` (discharge or charge magnitude) that can be held
/// this step and still be ramped down to zero at `ramp_per_step` per step
/// without consuming more than `budget_ws` from the reservoir.
///
/// `weight` converts terminal energy to reservoir energy (1/η_discharge for
/// discharge, η_charge for charge).
fn ramp_aware_energy_limit(budget_ws: f64, dt: f64, weight: f64, ramp_per_step: f64, cap: f64) -> f64 {
    if budget_ws <= 0.0 || cap <= 0.0 {
        return 0.0;
    }
    let cost = |p: f64| -> f64 {
        let m = (p / ramp_per_step).ceil().max(1.0);
        (m * p - ramp_per_step * m * (m - 1.0) / 2.0) * dt * weight
    };
    if cost(cap) <= budget_ws {
        return cap;
    }
    let (mut lo, mut hi) = (0.0_f64, cap);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cost(mid) <= budget_ws {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Advances the battery by `dt` seconds under a power request.
///
/// Clipping, in order of increasing priority: the ramp window around the
/// previous power, the charge/discharge power limits, and the stored energy
/// (or headroom) over the step. The energy limit looks ahead: it never grants
/// a power that could not be ramped back to zero before the reservoir bound is
/// reached, so ramp and SoC constraints hold together on every step.
pub fn battery_step(params: &BatteryParams, state: &BatteryState, p_request: f64, dt: f64) -> BatteryStep {
    battery_step_within(params, state, p_request, dt, f64::NEG_INFINITY, f64::INFINITY)
}

/// [`battery_step`] with an additional hard window `[min_power, max_power]`
/// imposed by the surrounding circuit (for example, charge cannot exceed the
/// PV power available to supply it). The hard window overrides the ramp limit.
pub fn battery_step_within(
    params: &BatteryParams,
    state: &BatteryState,
    p_request: f64,
    dt: f64,
    min_power: f64,
    max_power: f64,
) -> BatteryStep {
    assert!(dt > 0.0, "battery_step requires dt > 0");
    let capacity_ws = params.capacity_ws();
    let ramp_per_step = params.ramp_limit * dt;

    let available_ws = ((state.soc - params.soc_min) * capacity_ws).max(0.0);
    let headroom_ws = ((params.soc_max - state.soc) * capacity_ws).max(0.0);
    let discharge_cap =
        ramp_aware_energy_limit(available_ws, dt, 1.0 / params.eta_discharge, ramp_per_step, params.p_discharge_max);
    let charge_cap = ramp_aware_energy_limit(headroom_ws, dt, params.eta_charge, ramp_per_step, params.p_charge_max);

    let hard_lo = (-charge_cap).max(min_power);
    let hard_hi = discharge_cap.min(max_power).max(hard_lo);
    let ramp_lo = state.last_power - ramp_per_step;
    let ramp_hi = state.last_power + ramp_per_step;

    let p_actual = p_request.clamp(ramp_lo, ramp_hi).clamp(hard_lo, hard_hi);

    let limit = if p_request > p_actual && p_actual >= discharge_cap && discharge_cap < params.p_discharge_max {
        Some(SocLimit::Depleted)
    } else if p_request < p_actual && p_actual <= -charge_cap && charge_cap < params.p_charge_max {
        Some(SocLimit::Full)
    } else {
        None
    };

    let delta_ws =
        if p_actual >= 0.0 { -p_actual * dt / params.eta_discharge } else { -p_actual * dt * params.eta_charge };
    let mut soc = state.soc + delta_ws / capacity_ws;
    // Absorb rounding at the bounds.
    soc = soc.clamp(params.soc_min, params.soc_max);
    if p_actual > 0.0 && discharge_cap <= p_actual && available_ws <= p_actual * dt / params.eta_discharge {
        soc = params.soc_min;
    }
    if p_actual < 0.0 && charge_cap <= -p_actual && headroom_ws <= -p_actual * dt * params.eta_charge {
        soc = params.soc_max;
    }

    BatteryStep { p_actual, state: BatteryState { soc, last_power: p_actual }, limit }
}
