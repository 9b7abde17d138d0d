//! Closed-loop time-stepped simulation: environment → PV → controller →
//! battery → load, one [`SimSample`] per step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::{battery_step_within, BatteryState, SocLimit};
use crate::controller::{control_step, ControlDecision, Integrator, Mode};
use crate::pv::{mppt_step, scaled_power, MpptState, PvError, SingleDiode};
use crate::scenario::{sample_env, PvModelKind, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ScenarioError),
    #[error(transparent)]
    Pv(#[from] PvError),
    #[error("energy imbalance: {what} residual {residual:.3e} (relative) exceeds {tolerance:.0e}")]
    Imbalance { what: &'static str, residual: f64, tolerance: f64 },
    #[error("result has no samples")]
    Empty,
}

/// Whether the battery takes part in stabilization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Curtailment plus battery absorption and insertion.
    #[default]
    Dpi,
    /// Curtailment only; the battery never acts.
    SpgOnly,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Dpi => "dpi",
            RunMode::SpgOnly => "spg-only",
        })
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dpi" => Ok(RunMode::Dpi),
            "spg-only" => Ok(RunMode::SpgOnly),
            other => Err(format!("unknown run mode `{other}` (expected dpi or spg-only)")),
        }
    }
}

/// One step of a run. Powers are in watts and hold over `[t, t + dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSample {
    pub t: f64,
    pub irradiance: f64,
    pub temperature: f64,
    pub p_set: f64,
    /// PV power available at the maximum power point.
    pub p_pv: f64,
    /// PV power routed to the load.
    pub p_pv_to_load: f64,
    /// Available PV power left unharvested.
    pub p_curtailed: f64,
    pub p_load: f64,
    /// Battery terminal power, positive when discharging.
    pub p_batt: f64,
    /// State of charge at the end of the step.
    pub soc: f64,
    pub mode: Mode,
    pub duty: f64,
    pub battery_limit: Option<SocLimit>,
}

impl SimSample {
    pub fn p_charge(&self) -> f64 {
        (-self.p_batt).max(0.0)
    }

    pub fn p_discharge(&self) -> f64 {
        self.p_batt.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub samples: Vec<SimSample>,
    pub scenario_digest: String,
    pub mode: RunMode,
    pub dt_s: f64,
}

/// Runs the scenario with the battery active.
pub fn run(scenario: &Scenario) -> Result<SimResult, SimError> {
    run_mode(scenario, RunMode::Dpi)
}

pub fn run_mode(scenario: &Scenario, mode: RunMode) -> Result<SimResult, SimError> {
    let mut samples = Vec::with_capacity(scenario.steps());
    run_streaming(scenario, mode, |s| samples.push(*s))?;
    Ok(SimResult { samples, scenario_digest: scenario.digest(), mode, dt_s: scenario.dt_s })
}

/// Runs the scenario, handing each sample to `emit` as soon as it is produced.
/// `emit` must not block; see [`crate::handoff`] for a lossless buffered sink.
pub fn run_streaming<F>(scenario: &Scenario, mode: RunMode, mut emit: F) -> Result<(), SimError>
where
    F: FnMut(&SimSample),
{
    scenario.validate()?;
    let cfg = &scenario.controller;
    let dt = scenario.dt_s;

    let mut battery = BatteryState::initial(&scenario.battery);
    let mut integ = Integrator::default();
    let mut tracker = MpptState::for_panel(&scenario.panel);
    let mut pending: Option<ControlDecision> = None;

    for k in 0..scenario.steps() {
        let t = (k as f64 * dt).min(scenario.duration_s);
        let env = sample_env(scenario, t)?;

        let p_avail = match scenario.pv_model {
            PvModelKind::Scaled => scaled_power(&scenario.panel, &env),
            PvModelKind::SingleDiode => {
                let curve = SingleDiode::new(&scenario.panel, &env);
                let v = tracker.v_ref;
                let p = curve.power(v)?.max(0.0);
                tracker = mppt_step(&tracker, p, v);
                p
            }
        };

        let cap = cfg.p_set.min(scenario.load_demand_w);
        let pv_only_load = p_avail.min(cap);
        let fresh = control_step(p_avail, pv_only_load, cfg, &mut integ, dt);
        let decision = if scenario.actuation_delay { pending.replace(fresh).unwrap_or(fresh) } else { fresh };

        let request = match (mode, decision.mode) {
            (RunMode::SpgOnly, _) | (_, Mode::Bypass) => 0.0,
            (RunMode::Dpi, Mode::Charge) => -(-decision.p_batt_target).min(p_avail - pv_only_load).max(0.0),
            (RunMode::Dpi, Mode::Insert) => decision.p_batt_target.min(cap - pv_only_load).max(0.0),
        };

        let (p_batt, limit) = match mode {
            RunMode::SpgOnly => (0.0, None),
            RunMode::Dpi => {
                // Charge must be supplied by PV; insertion cannot exceed what the load takes.
                let step = battery_step_within(&scenario.battery, &battery, request, dt, -p_avail, cap);
                battery = step.state;
                (step.p_actual, step.limit)
            }
        };

        let discharge = p_batt.max(0.0);
        let charge = (-p_batt).max(0.0);
        let p_pv_to_load = (cap - discharge).min(p_avail - charge).max(0.0);
        let p_load = p_pv_to_load + discharge;
        let p_curtailed = (p_avail - p_pv_to_load - charge).max(0.0);

        // Switch state follows the direction power actually flowed.
        let sample_mode = if p_batt > 0.0 {
            Mode::Insert
        } else if p_batt < 0.0 {
            Mode::Charge
        } else {
            decision.mode
        };

        emit(&SimSample {
            t,
            irradiance: env.irradiance,
            temperature: env.ambient_temp,
            p_set: cfg.p_set,
            p_pv: p_avail,
            p_pv_to_load,
            p_curtailed,
            p_load,
            p_batt,
            soc: battery.soc,
            mode: sample_mode,
            duty: decision.duty,
            battery_limit: limit,
        });
    }
    Ok(())
}

/// Energy accounting of a run, in watt-hours. Each sample's powers are held
/// over one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBalance {
    pub e_pv_available: f64,
    pub e_pv_delivered: f64,
    pub e_load: f64,
    pub e_charge_in: f64,
    pub e_discharge_out: f64,
    pub e_loss: f64,
    pub e_curtailed: f64,
    /// Change in stored energy from the SoC trajectory.
    pub e_stored_delta: f64,
    /// |E_pv_delivered + E_discharge − E_load − E_charge| relative to the throughput.
    pub residual: f64,
    /// Mismatch between stored-energy change and efficiency-weighted battery flow.
    pub storage_residual: f64,
}

pub const BALANCE_TOLERANCE: f64 = 1e-6;

pub fn energy_balance(result: &SimResult, scenario: &Scenario) -> Result<EnergyBalance, SimError> {
    let last = result.samples.last().ok_or(SimError::Empty)?;
    let to_wh = result.dt_s / 3600.0;
    let bp = &scenario.battery;

    let mut b = EnergyBalance {
        e_pv_available: 0.0,
        e_pv_delivered: 0.0,
        e_load: 0.0,
        e_charge_in: 0.0,
        e_discharge_out: 0.0,
        e_loss: 0.0,
        e_curtailed: 0.0,
        e_stored_delta: 0.0,
        residual: 0.0,
        storage_residual: 0.0,
    };
    let mut stored_flow = 0.0;
    for s in &result.samples {
        let (c, d) = (s.p_charge(), s.p_discharge());
        b.e_pv_available += s.p_pv * to_wh;
        b.e_pv_delivered += (s.p_pv_to_load + c) * to_wh;
        b.e_load += s.p_load * to_wh;
        b.e_charge_in += c * to_wh;
        b.e_discharge_out += d * to_wh;
        b.e_curtailed += s.p_curtailed * to_wh;
        b.e_loss += (c * (1.0 - bp.eta_charge) + d * (1.0 / bp.eta_discharge - 1.0)) * to_wh;
        stored_flow += (c * bp.eta_charge - d / bp.eta_discharge) * to_wh;
    }
    // SoC before the first step is the configured initial value.
    b.e_stored_delta = (last.soc - bp.initial_soc) * bp.capacity_wh();

    let scale = (b.e_load + b.e_pv_delivered + b.e_charge_in + b.e_discharge_out).max(1e-12);
    b.residual = (b.e_pv_delivered + b.e_discharge_out - b.e_load - b.e_charge_in).abs() / scale;
    let storage_scale = (b.e_charge_in + b.e_discharge_out).max(1e-12);
    b.storage_residual = if result.mode == RunMode::SpgOnly {
        b.e_stored_delta.abs() / storage_scale
    } else {
        (b.e_stored_delta - stored_flow).abs() / storage_scale
    };

    if b.residual > BALANCE_TOLERANCE {
        return Err(SimError::Imbalance { what: "power flow", residual: b.residual, tolerance: BALANCE_TOLERANCE });
    }
    if b.storage_residual > BALANCE_TOLERANCE {
        return Err(SimError::Imbalance {
            what: "stored energy",
            residual: b.storage_residual,
            tolerance: BALANCE_TOLERANCE,
        });
    }
    Ok(b)
}
