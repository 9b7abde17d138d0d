//! Channel telemetry for simulation runs: update encoding, a local ingest
//! service with per-channel rate limiting and persistence, and a client that
//! forwards decimated samples.

pub mod client;
pub mod encode;
pub mod server;
pub mod store;

pub use client::{forward, Decimator, ForwardStats, RetryPolicy, TelemetryClient};
pub use encode::{encode_update, format_field};
pub use store::{ChannelConfig, ChannelStore, Clock, IngestOutcome, ManualClock, StoreError, SystemClock};
