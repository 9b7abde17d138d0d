//! Battery-backed stabilization of fluctuating photovoltaic output.
//!
//! The crate models a PV panel, a storage battery and the dynamic power
//! insertion (DPI) controller that holds the delivered power at a setpoint:
//! surplus PV is absorbed into the battery, deficits are filled from it, and
//! whatever the battery cannot take is curtailed. A deterministic time-stepped
//! engine runs scenarios with shading events, and the metrics module computes
//! the stabilization error, ramp rates and energy totals of a run.

pub mod battery;
pub mod controller;
pub mod handoff;
pub mod metrics;
pub mod output;
pub mod pv;
pub mod scenario;
pub mod sim;

pub use battery::{battery_step, BatteryParams, BatteryState, BatteryStep, SocLimit};
pub use controller::{control_step, ControlDecision, ControllerConfig, Mode, SwitchStates};
pub use metrics::{MetricsOptions, MetricsReport};
pub use pv::{EnvSample, MpptState, PanelParams};
pub use scenario::{load_scenario, sample_env, Scenario, ScenarioError, ShadingEvent};
pub use sim::{energy_balance, run, run_mode, EnergyBalance, RunMode, SimError, SimResult, SimSample};
