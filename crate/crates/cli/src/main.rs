//! `dpi-sim`: run simulations, recompute reports, compare modes and serve
//! the telemetry ingest service.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpi_core::RunMode;

#[derive(Parser)]
#[command(name = "dpi-sim", version, about = "PV output stabilization with a battery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario, writing a CSV trace and a metrics report.
    Run(RunArgs),
    /// Recompute metrics from an existing CSV trace.
    Report(ReportArgs),
    /// Run a scenario with and without the battery and tabulate both.
    Compare(CompareArgs),
    /// Serve the telemetry ingest endpoints.
    Serve(ServeArgs),
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    s.parse()
}

#[derive(clap::Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// CSV trace output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Report output path; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// `dpi` or `spg-only`.
    #[arg(long, default_value = "dpi", value_parser = parse_mode)]
    pub mode: RunMode,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Telemetry service base URL, e.g. http://127.0.0.1:3000.
    #[arg(long, env = dpi_telemetry::client::URL_ENV)]
    pub telemetry_url: Option<String>,
    /// Channel write key for telemetry updates.
    #[arg(long, env = dpi_telemetry::client::KEY_ENV)]
    pub telemetry_key: Option<String>,
    /// Simulated seconds between forwarded telemetry updates.
    #[arg(long, default_value_t = 15.0)]
    pub telemetry_interval: f64,
    /// Wall-clock seconds to wait before retrying a rate-limited update.
    #[arg(long, default_value_t = 15.0)]
    pub telemetry_retry_wait: f64,
}

#[derive(clap::Args)]
pub struct ReportArgs {
    /// CSV trace written by `run`.
    #[arg(long)]
    pub csv: PathBuf,
    /// Scenario whose setpoint and deadband apply; otherwise the CSV's
    /// `p_set` column and `--hysteresis` are used.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub hysteresis: f64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(clap::Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(clap::Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, env = dpi_telemetry::server::BIND_ENV, default_value = dpi_telemetry::server::DEFAULT_BIND)]
    pub bind: String,
    /// Directory holding the per-channel record logs.
    #[arg(long, default_value = "telemetry-data")]
    pub data_dir: PathBuf,
    /// Minimum seconds between accepted updates on a channel.
    #[arg(long, default_value_t = 15.0)]
    pub min_interval: f64,
    /// Channel as `id:write_key[:read_key]`; repeat for more channels.
    #[arg(long = "channel", required = true)]
    pub channels: Vec<dpi_telemetry::ChannelConfig>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Report(a) => commands::report(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Serve(a) => commands::serve(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpi-sim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
