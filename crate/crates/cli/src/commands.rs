use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dpi_core::handoff;
use dpi_core::metrics::{self, report_samples, MetricsOptions};
use dpi_core::output::{read_csv, write_csv};
use dpi_core::sim::run_streaming;
use dpi_core::{energy_balance, load_scenario, Scenario, SimResult};
use dpi_telemetry::{forward, ChannelStore, RetryPolicy, SystemClock, TelemetryClient};
use thiserror::Error;

use crate::{CompareArgs, Format, ReportArgs, RunArgs, ServeArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    load_scenario(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn emit(text: &str, dest: Option<&Path>) -> Result<(), CliError> {
    match dest {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            io::stdout().flush().map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

fn render(r: &metrics::MetricsReport, format: Format) -> String {
    match format {
        Format::Table => r.to_table(),
        Format::Json => r.to_json() + "\n",
    }
}

struct Telemetry {
    tx: handoff::SampleSender,
    worker: thread::JoinHandle<Result<dpi_telemetry::ForwardStats, String>>,
}

fn start_telemetry(a: &RunArgs) -> Result<Option<Telemetry>, CliError> {
    let (url, key) = match (&a.telemetry_url, &a.telemetry_key) {
        (None, _) => return Ok(None),
        (Some(u), Some(k)) => (u.clone(), k.clone()),
        (Some(_), None) => return Err(CliError::Config("telemetry URL given without a write key".into())),
    };
    for (name, v) in [("interval", a.telemetry_interval), ("retry wait", a.telemetry_retry_wait)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CliError::Config(format!("telemetry {name} {v} is not a duration")));
        }
    }
    let client = TelemetryClient::new(&url, &key).map_err(|e| CliError::Config(format!("telemetry: {e}")))?;
    let (tx, rx) =
        handoff::channel(4096, &std::env::temp_dir()).map_err(|e| CliError::Io(format!("spill file: {e}")))?;
    let interval = a.telemetry_interval;
    let retry = RetryPolicy { wait: Duration::from_secs_f64(a.telemetry_retry_wait), attempts: 8 };
    let worker = thread::spawn(move || {
        let mut read_err = None;
        let samples = rx.map_while(|r| r.map_err(|e| read_err = Some(e)).ok());
        let stats = forward(samples, &client, interval, retry).map_err(|e| e.to_string())?;
        match read_err {
            Some(e) => Err(format!("hand-off: {e}")),
            None => Ok(stats),
        }
    });
    Ok(Some(Telemetry { tx, worker }))
}

pub fn run(a: &RunArgs) -> Result<(), CliError> {
    let scenario = load(&a.scenario)?;
    let telemetry = start_telemetry(a)?;

    let mut samples = Vec::with_capacity(scenario.steps());
    let mut send_err = None;
    run_streaming(&scenario, a.mode, |s| {
        samples.push(*s);
        if let (Some(t), None) = (&telemetry, &send_err) {
            send_err = t.tx.send(s).err();
        }
    })
    .map_err(|e| CliError::Config(format!("{}: {e}", a.scenario.display())))?;

    let result = SimResult { samples, scenario_digest: scenario.digest(), mode: a.mode, dt_s: scenario.dt_s };
    energy_balance(&result, &scenario).map_err(|e| CliError::Config(e.to_string()))?;

    let file = File::create(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_csv(&result.samples, BufWriter::new(file)).map_err(|e| io_err(&a.out, e))?;
    let r = metrics::report(&result, &scenario).map_err(|e| CliError::Config(e.to_string()))?;
    emit(&render(&r, a.format), a.report.as_deref())?;

    if let Some(t) = telemetry {
        drop(t.tx);
        let stats = t.worker.join().map_err(|_| CliError::Io("telemetry worker panicked".into()))?;
        if let Some(e) = send_err {
            return Err(CliError::Io(format!("hand-off: {e}")));
        }
        let stats = stats.map_err(|e| CliError::Io(format!("telemetry: {e}")))?;
        eprintln!(
            "telemetry: {} samples, {} updates sent, {} accepted, {} rate limited, {} dropped",
            stats.received, stats.sent, stats.accepted, stats.rate_limited, stats.dropped
        );
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let file = File::open(&a.csv).map_err(|e| CliError::Config(format!("{}: {e}", a.csv.display())))?;
    let samples = read_csv(file).map_err(|e| CliError::Config(format!("{}: {e}", a.csv.display())))?;
    let (p_set, hysteresis) = match &a.scenario {
        Some(p) => {
            let s = load(p)?;
            (s.controller.p_set, s.controller.hysteresis_w)
        }
        None => {
            let first = samples.first().ok_or_else(|| CliError::Config(format!("{}: no samples", a.csv.display())))?;
            (first.p_set, a.hysteresis)
        }
    };
    let r = report_samples(&samples, p_set, hysteresis, &MetricsOptions::default())
        .map_err(|e| CliError::Config(format!("{}: {e}", a.csv.display())))?;
    emit(&render(&r, a.format), None)
}

pub fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let scenario = load(&a.scenario)?;
    let c = metrics::compare(&scenario).map_err(|e| CliError::Config(format!("{}: {e}", a.scenario.display())))?;
    let text = match a.format {
        Format::Table => c.to_string(),
        Format::Json => serde_json::to_string_pretty(&c).expect("comparison serializes") + "\n",
    };
    emit(&text, None)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => return ctrl_c.await,
        };
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    if !(a.min_interval.is_finite() && a.min_interval >= 0.0) {
        return Err(CliError::Config(format!("min interval {} is not a duration", a.min_interval)));
    }
    let store =
        ChannelStore::open(&a.data_dir, &a.channels, Duration::from_secs_f64(a.min_interval), Arc::new(SystemClock))
            .map_err(|e| CliError::Config(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(format!("runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::Config(format!("cannot bind {}: {e}", a.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        println!("listening on http://{addr}");
        io::stdout().flush().map_err(|e| CliError::Io(format!("stdout: {e}")))?;
        dpi_telemetry::server::serve(listener, Arc::new(store), shutdown_signal())
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}
