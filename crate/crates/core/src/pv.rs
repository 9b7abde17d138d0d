//! Photovoltaic panel models and the perturb-and-observe tracker.
//!
//! Two models are provided. [`scaled_power`] is the fast irradiance/temperature
//! scaling model used by default in system runs. [`SingleDiode`] solves the
//! implicit single-diode equation and gives a full I-V curve, which is what the
//! MPPT tracker climbs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boltzmann constant, J/K.
const BOLTZMANN: f64 = 1.380_649e-23;
/// Elementary charge, C.
const ELECTRON_CHARGE: f64 = 1.602_176_634e-19;
const KELVIN_OFFSET: f64 = 273.15;

/// Current tolerance of the implicit I-V solver, amps.
pub const SOLVER_TOLERANCE_A: f64 = 1e-9;
/// Iteration cap of the implicit I-V solver.
pub const SOLVER_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PvError {
    #[error("single-diode solver did not converge after {iterations} iterations at {voltage} V")]
    NonConvergence { voltage: f64, iterations: usize },
    #[error("operating voltage {voltage} V outside [0, {max}] V")]
    VoltageOutOfRange { voltage: f64, max: f64 },
}

/// Electrical parameters of a PV panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelParams {
    /// Rated power at standard test conditions, W.
    pub p_stc: f64,
    /// Power temperature coefficient, 1/°C (negative).
    pub gamma: f64,
    /// Reference irradiance, W/m².
    pub g_stc: f64,
    /// Reference cell temperature, °C.
    pub t_stc: f64,
    /// Short-circuit current, A.
    pub i_sc: f64,
    /// Open-circuit voltage, V.
    pub v_oc: f64,
    pub n_ideality: f64,
    /// Series resistance, Ω.
    pub r_s: f64,
    /// Shunt resistance, Ω.
    pub r_sh: f64,
    pub n_cells: u32,
    /// Cell temperature rise per unit irradiance, °C per W/m².
    pub k_noct: f64,
}

impl Default for PanelParams {
    /// A 100 Wp single-crystal module.
    fn default() -> Self {
        Self {
            p_stc: 100.0,
            gamma: -0.004,
            g_stc: 1000.0,
            t_stc: 25.0,
            i_sc: 6.1,
            v_oc: 22.0,
            n_ideality: 1.3,
            r_s: 0.15,
            r_sh: 250.0,
            n_cells: 36,
            k_noct: 0.03,
        }
    }
}

impl PanelParams {
    /// Checks the parameter invariants, returning the offending field name and
    /// a message on failure.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let positive = [
            ("p_stc", self.p_stc),
            ("g_stc", self.g_stc),
            ("i_sc", self.i_sc),
            ("v_oc", self.v_oc),
            ("n_ideality", self.n_ideality),
            ("r_sh", self.r_sh),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err((name, format!("must be > 0, got {value}")));
            }
        }
        if !(self.r_s.is_finite() && self.r_s >= 0.0) {
            return Err(("r_s", format!("must be >= 0, got {}", self.r_s)));
        }
        if !(-0.01..=0.0).contains(&self.gamma) {
            return Err(("gamma", format!("must lie in [-0.01, 0], got {}", self.gamma)));
        }
        if self.n_cells < 1 {
            return Err(("n_cells", "must be >= 1".to_string()));
        }
        if !self.t_stc.is_finite() {
            return Err(("t_stc", "must be finite".to_string()));
        }
        if !(self.k_noct.is_finite() && self.k_noct >= 0.0) {
            return Err(("k_noct", format!("must be >= 0, got {}", self.k_noct)));
        }
        Ok(())
    }

    /// Cell temperature from ambient temperature and irradiance (linear NOCT-style rise).
    pub fn cell_temp(&self, env: &EnvSample) -> f64 {
        env.ambient_temp + self.k_noct * env.irradiance
    }
}

/// Irradiance and ambient temperature at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSample {
    /// Seconds since scenario start.
    pub t: f64,
    /// W/m².
    pub irradiance: f64,
    /// °C.
    pub ambient_temp: f64,
}

impl EnvSample {
    pub fn new(t: f64, irradiance: f64, ambient_temp: f64) -> Self {
        Self { t, irradiance, ambient_temp }
    }

    /// Standard test conditions expressed as ambient conditions for `params`,
    /// i.e. ambient chosen so the cell sits at `t_stc`.
    pub fn stc(params: &PanelParams) -> Self {
        Self::new(0.0, params.g_stc, params.t_stc - params.k_noct * params.g_stc)
    }
}

/// Available PV power from the irradiance/temperature scaling model.
pub fn scaled_power(params: &PanelParams, env: &EnvSample) -> f64 {
    scaled_power_at_cell_temp(params, env.irradiance, params.cell_temp(env))
}

/// Scaling model evaluated at an explicit cell temperature.
pub fn scaled_power_at_cell_temp(params: &PanelParams, irradiance: f64, cell_temp: f64) -> f64 {
    let irradiance = irradiance.max(0.0);
    let p = params.p_stc * (irradiance / params.g_stc) * (1.0 + params.gamma * (cell_temp - params.t_stc));
    if p.is_finite() {
        p.max(0.0)
    } else {
        0.0
    }
}

/// A single-diode I-V curve frozen at one set of environmental conditions.
///
/// The saturation current is calibrated at STC so that the curve passes through
/// `(0, i_sc)` (up to shunt leakage) and `(v_oc, 0)`. The photocurrent scales
/// linearly with irradiance; temperature enters through the thermal voltage.
#[derive(Debug, Clone, Copy)]
pub struct SingleDiode {
    i_ph: f64,
    i_0: f64,
    /// Modified ideality factor n·V_t·N_cells, V.
    a: f64,
    r_s: f64,
    r_sh: f64,
    v_max: f64,
}

fn thermal_voltage(cell_temp_c: f64) -> f64 {
    BOLTZMANN * (cell_temp_c + KELVIN_OFFSET) / ELECTRON_CHARGE
}

impl SingleDiode {
    pub fn new(params: &PanelParams, env: &EnvSample) -> Self {
        let cells = f64::from(params.n_cells);
        let a_stc = params.n_ideality * thermal_voltage(params.t_stc) * cells;
        let i_ph_stc = params.i_sc * (1.0 + params.r_s / params.r_sh);
        let i_0 = (i_ph_stc - params.v_oc / params.r_sh) / (params.v_oc / a_stc).exp_m1();

        let cell_temp = params.cell_temp(env);
        Self {
            i_ph: i_ph_stc * env.irradiance.max(0.0) / params.g_stc,
            i_0,
            a: params.n_ideality * thermal_voltage(cell_temp) * cells,
            r_s: params.r_s,
            r_sh: params.r_sh,
            v_max: 1.2 * params.v_oc,
        }
    }

    /// Residual of the implicit equation and its derivative with respect to I.
    fn residual(&self, v: f64, i: f64) -> (f64, f64) {
        let vd = v + i * self.r_s;
        let e = (vd / self.a).exp();
        let g = self.i_ph - self.i_0 * (e - 1.0) - vd / self.r_sh - i;
        let dg = -self.i_0 * self.r_s / self.a * e - self.r_s / self.r_sh - 1.0;
        (g, dg)
    }

    /// Terminal current at voltage `v`.
    ///
    /// Safeguarded Newton iteration inside a sign-changing bracket; falls back
    /// to bisection whenever the Newton step leaves the bracket.
    pub fn current(&self, v: f64) -> Result<f64, PvError> {
        if !(0.0..=self.v_max).contains(&v) {
            return Err(PvError::VoltageOutOfRange { voltage: v, max: self.v_max });
        }
        if self.r_s == 0.0 {
            return Ok(self.i_ph - self.i_0 * (v / self.a).exp_m1() - v / self.r_sh);
        }

        // g(hi) <= 0 because the diode and shunt terms are nonnegative there;
        // g(lo) >= 0 because the diode voltage is zero there.
        let mut hi = self.i_ph;
        let mut lo = -v / self.r_s;
        let mut i = self.i_ph - self.i_0 * (v / self.a).exp_m1() - v / self.r_sh;
        i = i.clamp(lo, hi);

        for _ in 0..SOLVER_MAX_ITER {
            let (g, dg) = self.residual(v, i);
            if !g.is_finite() {
                hi = i;
                let next = 0.5 * (lo + hi);
                if (next - i).abs() < SOLVER_TOLERANCE_A {
                    return Ok(next);
                }
                i = next;
                continue;
            }
            if g > 0.0 {
                lo = i;
            } else {
                hi = i;
            }
            let mut next = i - g / dg;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - i).abs() < SOLVER_TOLERANCE_A || hi - lo < SOLVER_TOLERANCE_A {
                return Ok(next);
            }
            i = next;
        }
        Err(PvError::NonConvergence { voltage: v, iterations: SOLVER_MAX_ITER })
    }

    /// Terminal power at voltage `v`.
    pub fn power(&self, v: f64) -> Result<f64, PvError> {
        Ok(v * self.current(v)?)
    }

    /// Upper end of the valid voltage range (1.2·v_oc).
    pub fn v_max(&self) -> f64 {
        self.v_max
    }
}

/// Current of the single-diode model at terminal voltage `v`.
pub fn diode_current(params: &PanelParams, v: f64, env: &EnvSample) -> Result<f64, PvError> {
    SingleDiode::new(params, env).current(v)
}

/// Perturb-and-observe tracker state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpptState {
    /// Voltage reference handed to the converter, V.
    pub v_ref: f64,
    pub last_p: f64,
    pub last_v: f64,
    /// Perturbation step, V.
    pub step_v: f64,
    /// Upper clamp for `v_ref`, normally the panel's v_oc.
    pub v_max: f64,
    /// Current perturbation direction, +1 or -1.
    pub direction: f64,
}

impl MpptState {
    pub const DEFAULT_STEP_V: f64 = 0.1;

    pub fn new(v_start: f64, step_v: f64, v_max: f64) -> Self {
        Self {
            v_ref: v_start.clamp(0.0, v_max),
            last_p: 0.0,
            last_v: v_start.clamp(0.0, v_max),
            step_v,
            v_max,
            direction: 1.0,
        }
    }

    /// Tracker starting at 80 % of v_oc with the default step.
    pub fn for_panel(params: &PanelParams) -> Self {
        Self::new(0.8 * params.v_oc, Self::DEFAULT_STEP_V, params.v_oc)
    }
}

/// One perturb-and-observe iteration.
///
/// If power did not drop the perturbation keeps its direction, otherwise it
/// reverses. The direction is inferred from the last voltage move when there
/// was one and taken from the stored direction otherwise. Hitting a clamp
/// reverses the direction so the tracker cannot park on a boundary.
pub fn mppt_step(state: &MpptState, measured_p: f64, measured_v: f64) -> MpptState {
    let dp = measured_p - state.last_p;
    let dv = measured_v - state.last_v;
    let moved = if dv > 0.0 {
        1.0
    } else if dv < 0.0 {
        -1.0
    } else {
        state.direction
    };
    let mut direction = if dp >= 0.0 { moved } else { -moved };

    let mut v_ref = state.v_ref + direction * state.step_v;
    if v_ref > state.v_max {
        v_ref = state.v_max;
        direction = -1.0;
    } else if v_ref < 0.0 {
        v_ref = 0.0;
        direction = 1.0;
    }

    MpptState { v_ref, last_p: measured_p, last_v: measured_v, step_v: state.step_v, v_max: state.v_max, direction }
}
