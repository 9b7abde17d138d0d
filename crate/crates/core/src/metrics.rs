//! Post-run analysis: stabilization error, ramp rates and energy totals.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::scenario::Scenario;
use crate::sim::{run_mode, RunMode, SimError, SimResult, SimSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series is empty or too short")]
    EmptySeries,
    #[error("window [{t_start}, {t_end}] s holds {count} samples, need at least 2")]
    WindowTooSmall { t_start: f64, t_end: f64, count: usize },
}

/// Which power column of a sample to analyse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    PPv,
    PLoad,
    PBatt,
    PCurtailed,
    PCharge,
    PDischarge,
}

impl Field {
    pub fn get(self, s: &SimSample) -> f64 {
        match self {
            Field::PPv => s.p_pv,
            Field::PLoad => s.p_load,
            Field::PBatt => s.p_batt,
            Field::PCurtailed => s.p_curtailed,
            Field::PCharge => s.p_charge(),
            Field::PDischarge => s.p_discharge(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Flat,
}

/// Ramp magnitude with its sign reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ramp {
    /// |slope|, W/s.
    pub rate: f64,
    pub direction: Direction,
}

impl Ramp {
    fn from_slope(slope: f64) -> Self {
        let direction = if slope > 0.0 {
            Direction::Up
        } else if slope < 0.0 {
            Direction::Down
        } else {
            Direction::Flat
        };
        Ramp { rate: slope.abs(), direction }
    }
}

/// Marks samples that are at least `settle_s` seconds past the most recent
/// mode transition. The first sample counts as a transition.
pub fn steady_state_mask(samples: &[SimSample], settle_s: f64) -> Vec<bool> {
    let mut since = f64::NEG_INFINITY;
    let mut prev = None;
    samples
        .iter()
        .map(|s| {
            if prev != Some(s.mode) {
                since = s.t;
                prev = Some(s.mode);
            }
            s.t - since >= settle_s
        })
        .collect()
}

/// Mean absolute deviation of load power from the setpoint, as a percentage
/// of the setpoint.
pub fn stabilization_error(samples: &[SimSample], p_set: f64) -> Result<f64, MetricsError> {
    stabilization_error_where(samples, p_set, |_| true)
}

/// [`stabilization_error`] over the samples `keep` accepts.
pub fn stabilization_error_where<F>(samples: &[SimSample], p_set: f64, keep: F) -> Result<f64, MetricsError>
where
    F: Fn(usize) -> bool,
{
    let (sum, n) = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .fold((0.0, 0usize), |(sum, n), (_, s)| (sum + (s.p_load - p_set).abs(), n + 1));
    if n == 0 {
        return Err(MetricsError::EmptySeries);
    }
    Ok(100.0 * (sum / n as f64) / p_set)
}

/// Least-squares slope of `field` over the samples with `t` in the window.
pub fn ramp_rate(samples: &[SimSample], field: Field, window: (f64, f64)) -> Result<Ramp, MetricsError> {
    let points: Vec<(f64, f64)> =
        samples.iter().filter(|s| s.t >= window.0 && s.t <= window.1).map(|s| (s.t, field.get(s))).collect();
    if points.len() < 2 {
        return Err(MetricsError::WindowTooSmall { t_start: window.0, t_end: window.1, count: points.len() });
    }
    Ok(Ramp::from_slope(ls_slope(&points)))
}

fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(t, y)| {
        let dt = t - t_mean;
        (num + dt * (y - y_mean), den + dt * dt)
    });
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Trapezoidal energy of `field` over the series, Wh.
pub fn energy_wh(samples: &[SimSample], field: Field) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::EmptySeries);
    }
    let joules: f64 = samples.windows(2).map(|w| 0.5 * (field.get(&w[0]) + field.get(&w[1])) * (w[1].t - w[0].t)).sum();
    Ok(joules / 3600.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RampEvent {
    pub label: String,
    pub direction: Direction,
    pub t_start: f64,
    pub t_end: f64,
    /// PV ramp magnitude over the event, W/s.
    pub pv_ramp: f64,
    /// Battery ramp magnitude while it is inserting during the event, W/s.
    pub batt_ramp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsOptions {
    /// |dP_pv/dt| above which a sample belongs to a ramp event, W/s.
    pub ramp_threshold: f64,
    /// Width of the least-squares derivative window; 0 uses forward differences.
    pub derivative_window_s: f64,
    /// Exclude this many seconds after each mode change from the error metric.
    pub settle_s: Option<f64>,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { ramp_threshold: 0.5, derivative_window_s: 0.0, settle_s: None }
    }
}

fn derivative(samples: &[SimSample], k: usize, window_s: f64) -> f64 {
    if window_s <= 0.0 {
        let (a, b) = (&samples[k], &samples[k + 1]);
        return (b.p_pv - a.p_pv) / (b.t - a.t);
    }
    let centre = 0.5 * (samples[k].t + samples[k + 1].t);
    let lo = samples.partition_point(|s| s.t < centre - window_s / 2.0);
    let hi = samples.partition_point(|s| s.t <= centre + window_s / 2.0);
    let pts: Vec<(f64, f64)> = samples[lo..hi.max(lo + 2).min(samples.len())].iter().map(|s| (s.t, s.p_pv)).collect();
    ls_slope(&pts)
}

/// 1 → A, 26 → Z, 27 → AA, …
fn event_letters(mut n: usize) -> String {
    let mut out = Vec::new();
    while n > 0 {
        n -= 1;
        out.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ASCII letters")
}

/// Finds contiguous intervals where PV power changes faster than the
/// threshold. Falling events are labelled A, B, … in time order and rising
/// events A', B', ….
pub fn detect_ramp_events(samples: &[SimSample], opts: &MetricsOptions) -> Vec<RampEvent> {
    let mut events = Vec::new();
    if samples.len() < 2 {
        return events;
    }
    let mut k = 0;
    let (mut downs, mut ups) = (0usize, 0usize);
    while k + 1 < samples.len() {
        let d = derivative(samples, k, opts.derivative_window_s);
        if d.abs() <= opts.ramp_threshold {
            k += 1;
            continue;
        }
        let rising = d > 0.0;
        let start = k;
        while k + 1 < samples.len() {
            let d = derivative(samples, k, opts.derivative_window_s);
            if d.abs() <= opts.ramp_threshold || (d > 0.0) != rising {
                break;
            }
            k += 1;
        }
        let window = (samples[start].t, samples[k].t);
        let span = &samples[start..=k];
        let pv_ramp = ramp_rate(span, Field::PPv, window).map(|r| r.rate).unwrap_or(0.0);
        let inserting: Vec<(f64, f64)> = span.iter().filter(|s| s.p_batt > 0.0).map(|s| (s.t, s.p_batt)).collect();
        let batt_ramp = if inserting.len() >= 2 {
            ls_slope(&inserting).abs()
        } else {
            ramp_rate(span, Field::PBatt, window).map(|r| r.rate).unwrap_or(0.0)
        };
        let label = if rising {
            ups += 1;
            format!("{}'", event_letters(ups))
        } else {
            downs += 1;
            event_letters(downs)
        };
        events.push(RampEvent {
            label,
            direction: if rising { Direction::Up } else { Direction::Down },
            t_start: window.0,
            t_end: window.1,
            pv_ramp,
            batt_ramp,
        });
    }
    events
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub error_pct: f64,
    pub max_abs_deviation_w: f64,
    pub ramp_events: Vec<RampEvent>,
    /// Energy available from the PV, Wh.
    pub e_pv_wh: f64,
    /// Energy delivered to the load, Wh.
    pub e_stabilized_wh: f64,
    pub e_diff_wh: f64,
    pub e_curtailed_wh: f64,
    /// Net energy into the battery terminals, Wh.
    pub e_battery_net_wh: f64,
    /// Time the load spent below the setpoint deadband, s.
    pub deficit_duration_s: f64,
    /// Energy missing from the setpoint while in deficit, Wh.
    pub e_deficit_wh: f64,
    pub n: usize,
}

/// Metrics of a sample series with setpoint `p_set` and deadband `hysteresis_w`.
pub fn report_samples(
    samples: &[SimSample],
    p_set: f64,
    hysteresis_w: f64,
    opts: &MetricsOptions,
) -> Result<MetricsReport, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::EmptySeries);
    }
    let error_pct = match opts.settle_s {
        Some(settle) => {
            let mask = steady_state_mask(samples, settle);
            stabilization_error_where(samples, p_set, |i| mask[i])?
        }
        None => stabilization_error(samples, p_set)?,
    };
    let max_abs_deviation_w = samples.iter().map(|s| (s.p_load - p_set).abs()).fold(0.0, f64::max);
    let e_pv_wh = energy_wh(samples, Field::PPv)?;
    let e_stabilized_wh = energy_wh(samples, Field::PLoad)?;
    let e_battery_net_wh = energy_wh(samples, Field::PCharge)? - energy_wh(samples, Field::PDischarge)?;

    let mut deficit_duration_s = 0.0;
    let mut e_deficit = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let step = if i + 1 < samples.len() { samples[i + 1].t - s.t } else { s.t - samples[i - 1].t };
        let shortfall = p_set - s.p_load;
        if shortfall > hysteresis_w + 1e-9 {
            deficit_duration_s += step;
            e_deficit += shortfall * step;
        }
    }

    Ok(MetricsReport {
        error_pct,
        max_abs_deviation_w,
        ramp_events: detect_ramp_events(samples, opts),
        e_pv_wh,
        e_stabilized_wh,
        e_diff_wh: e_pv_wh - e_stabilized_wh,
        e_curtailed_wh: energy_wh(samples, Field::PCurtailed)?,
        e_battery_net_wh,
        deficit_duration_s,
        e_deficit_wh: e_deficit / 3600.0,
        n: samples.len(),
    })
}

pub fn report(result: &SimResult, scenario: &Scenario) -> Result<MetricsReport, MetricsError> {
    report_with(result, scenario, &MetricsOptions::default())
}

pub fn report_with(
    result: &SimResult,
    scenario: &Scenario,
    opts: &MetricsOptions,
) -> Result<MetricsReport, MetricsError> {
    report_samples(&result.samples, scenario.controller.p_set, scenario.controller.hysteresis_w, opts)
}

impl MetricsReport {
    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("samples", format!("{}", self.n)),
            ("stabilization error", format!("{:.3} %", self.error_pct)),
            ("max |p_load - p_set|", format!("{:.3} W", self.max_abs_deviation_w)),
            ("PV energy", format!("{:.4} Wh", self.e_pv_wh)),
            ("stabilized energy", format!("{:.4} Wh", self.e_stabilized_wh)),
            ("difference", format!("{:.4} Wh", self.e_diff_wh)),
            ("curtailed energy", format!("{:.4} Wh", self.e_curtailed_wh)),
            ("net battery charge", format!("{:.4} Wh", self.e_battery_net_wh)),
            ("deficit duration", format!("{:.1} s", self.deficit_duration_s)),
            ("deficit energy", format!("{:.4} Wh", self.e_deficit_wh)),
        ];
        for (k, v) in rows {
            out.push_str(&format!("{k:<24}{v}\n"));
        }
        if self.ramp_events.is_empty() {
            out.push_str("ramp events             none\n");
        } else {
            out.push_str("\nevent  dir   start_s   end_s    pv W/s   batt W/s\n");
            for e in &self.ramp_events {
                let dir = match e.direction {
                    Direction::Up => "up",
                    Direction::Down => "down",
                    Direction::Flat => "flat",
                };
                out.push_str(&format!(
                    "{:<6} {:<5} {:>7.1} {:>7.1} {:>9.3} {:>10.3}\n",
                    e.label, dir, e.t_start, e.t_end, e.pv_ramp, e.batt_ramp
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One mode's line in a DPI vs curtailment-only comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: RunMode,
    pub error_pct: f64,
    pub e_delivered_wh: f64,
    pub e_curtailed_wh: f64,
    pub deficit_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub dpi: ComparisonRow,
    pub spg_only: ComparisonRow,
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Runs the scenario with and without the battery and tabulates both.
pub fn compare(scenario: &Scenario) -> Result<Comparison, CompareError> {
    let row = |mode: RunMode| -> Result<ComparisonRow, CompareError> {
        let result = run_mode(scenario, mode)?;
        let r = report(&result, scenario)?;
        Ok(ComparisonRow {
            mode,
            error_pct: r.error_pct,
            e_delivered_wh: r.e_stabilized_wh,
            e_curtailed_wh: r.e_curtailed_wh,
            deficit_duration_s: r.deficit_duration_s,
        })
    };
    Ok(Comparison { dpi: row(RunMode::Dpi)?, spg_only: row(RunMode::SpgOnly)? })
}

impl Comparison {
    /// True when both rows carry identical metrics.
    pub fn rows_equal(&self) -> bool {
        let (a, b) = (&self.dpi, &self.spg_only);
        a.error_pct == b.error_pct
            && a.e_delivered_wh == b.e_delivered_wh
            && a.e_curtailed_wh == b.e_curtailed_wh
            && a.deficit_duration_s == b.deficit_duration_s
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>14} {:>14} {:>12}",
            "mode", "error %", "delivered Wh", "curtailed Wh", "deficit s"
        )?;
        for r in [&self.dpi, &self.spg_only] {
            writeln!(
                f,
                "{:<10} {:>10.3} {:>14.4} {:>14.4} {:>12.1}",
                r.mode.to_string(),
                r.error_pct,
                r.e_delivered_wh,
                r.e_curtailed_wh,
                r.deficit_duration_s
            )?;
        }
        Ok(())
    }
}
