//! Blocking update client and the decimating forwarder.

use std::time::Duration;

use dpi_core::SimSample;
use thiserror::Error;

use crate::encode::{update_params, UPDATE_PATH};

/// Environment variables naming the telemetry endpoint and write key.
pub const URL_ENV: &str = "DPI_TELEMETRY_URL";
pub const KEY_ENV: &str = "DPI_TELEMETRY_KEY";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response body {0:?}")]
    Body(String),
}

pub struct TelemetryClient {
    http: reqwest::blocking::Client,
    base_url: String,
    write_key: String,
}

impl TelemetryClient {
    pub fn new(base_url: &str, write_key: &str) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(10)).build()?;
        Ok(Self { http, base_url: base_url.trim_end_matches('/').to_string(), write_key: write_key.to_string() })
    }

    /// Posts one update. Returns the stored entry id, or 0 when the service
    /// rate limited it.
    pub fn send(&self, sample: &SimSample) -> Result<u64, ClientError> {
        let body = form_urlencoded::Serializer::new(String::new())
            .extend_pairs(update_params(sample, &self.write_key))
            .finish();
        let resp = self
            .http
            .post(format!("{}{UPDATE_PATH}", self.base_url))
            .header("content-type", "application/x-www-form-urlencoded")
            .body(body)
            .send()?;
        let status = resp.status();
        let text = resp.text()?;
        if !status.is_success() {
            return Err(ClientError::Status { status: status.as_u16(), body: text });
        }
        text.trim().parse().map_err(|_| ClientError::Body(text))
    }
}

/// Picks one sample per `interval_s` of simulated time: the first sample at
/// or after each slot boundary, the reading a logger polling on that period
/// would see.
#[derive(Debug, Clone)]
pub struct Decimator {
    interval_s: f64,
    next_slot: Option<f64>,
}

impl Decimator {
    pub fn new(interval_s: f64) -> Self {
        Self { interval_s, next_slot: None }
    }

    pub fn offer(&mut self, sample: &SimSample) -> Option<SimSample> {
        let due = self.next_slot.is_none_or(|t| sample.t >= t - 1e-9);
        if !due {
            return None;
        }
        let mut next = self.next_slot.unwrap_or(sample.t);
        if self.interval_s > 0.0 {
            while next <= sample.t + 1e-9 {
                next += self.interval_s;
            }
        }
        self.next_slot = Some(next);
        Some(*sample)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub received: usize,
    pub sent: usize,
    pub accepted: usize,
    pub rate_limited: usize,
    /// Slots given up after every retry was rate limited.
    pub dropped: usize,
}

/// How long to wait after a rate-limited update and how often to retry it.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub wait: Duration,
    pub attempts: usize,
}

/// Forwards one sample per `interval_s` of simulated time to `client`,
/// strictly one request at a time. A rate-limited update is retried after
/// `retry.wait`, up to `retry.attempts` times.
pub fn forward<I>(
    samples: I,
    client: &TelemetryClient,
    interval_s: f64,
    retry: RetryPolicy,
) -> Result<ForwardStats, ClientError>
where
    I: IntoIterator<Item = SimSample>,
{
    let mut dec = Decimator::new(interval_s);
    let mut stats = ForwardStats::default();
    for s in samples {
        stats.received += 1;
        let Some(out) = dec.offer(&s) else { continue };
        let mut delivered = false;
        for attempt in 0..=retry.attempts {
            if attempt > 0 {
                std::thread::sleep(retry.wait);
            }
            stats.sent += 1;
            if client.send(&out)? != 0 {
                stats.accepted += 1;
                delivered = true;
                break;
            }
            stats.rate_limited += 1;
        }
        if !delivered {
            stats.dropped += 1;
        }
    }
    Ok(stats)
}
