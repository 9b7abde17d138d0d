//! Channel storage: rate-limited ingest, feed reads and an append-only
//! per-channel record log replayed at startup.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::FIELD_COUNT;

pub const DEFAULT_MIN_INTERVAL: Duration = Duration::from_secs(15);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid api key")]
    Unauthorized,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("unknown channel {0}")]
    UnknownChannel(u64),
    #[error("channel {id}: {message}")]
    Config { id: u64, message: String },
    #[error("record log {path}: {source}")]
    Log { path: PathBuf, source: io::Error },
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        let mut t = self.0.lock().expect("clock lock poisoned");
        *t += TimeDelta::from_std(by).expect("duration in range");
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.0.lock().expect("clock lock poisoned") = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock poisoned")
    }
}

/// `id:write_key[:read_key]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    pub id: u64,
    pub write_key: String,
    pub read_key: Option<String>,
}

impl FromStr for ChannelConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let id = parts.next().unwrap_or("");
        let id: u64 = id.parse().map_err(|_| format!("channel id {id:?} is not a positive integer"))?;
        if id == 0 {
            return Err("channel id must be positive".into());
        }
        let write_key = parts.next().filter(|k| !k.is_empty()).ok_or("missing write key")?.to_string();
        let read_key = parts.next().filter(|k| !k.is_empty()).map(str::to_string);
        if parts.next().is_some() {
            return Err(format!("expected id:write_key[:read_key], got {s:?}"));
        }
        Ok(Self { id, write_key, read_key })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub entry_id: u64,
    pub created_at: DateTime<Utc>,
    /// `fields[i]` holds `field{i+1}` exactly as sent.
    pub fields: [Option<String>; FIELD_COUNT],
}

/// Outcome of an update: the new entry id, or `None` when rate limited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored(u64),
    RateLimited,
}

impl IngestOutcome {
    /// Response body: the entry id, `0` when rate limited.
    pub fn body(self) -> String {
        match self {
            IngestOutcome::Stored(id) => id.to_string(),
            IngestOutcome::RateLimited => "0".into(),
        }
    }
}

struct Channel {
    config: ChannelConfig,
    created_at: DateTime<Utc>,
    entries: Vec<Entry>,
    log: File,
    log_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInfo {
    pub id: u64,
    pub name: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: Option<DateTime<Utc>>,
    pub last_entry_id: Option<u64>,
}

pub struct ChannelStore {
    channels: HashMap<u64, Mutex<Channel>>,
    by_write_key: HashMap<String, u64>,
    min_interval: TimeDelta,
    clock: Arc<dyn Clock>,
}

fn log_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("channel-{id}.ndjson"))
}

/// Reads stored entries. A torn final line from an interrupted write is
/// dropped and cut from the file so later appends start on a clean line.
fn replay(path: &Path) -> io::Result<Vec<Entry>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut reader = BufReader::new(file);
    let mut entries: Vec<Entry> = Vec::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        let e: Entry =
            serde_json::from_str(line.trim_end()).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        if entries.last().is_some_and(|p| e.entry_id != p.entry_id + 1) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("entry {} does not follow {}", e.entry_id, entries.len()),
            ));
        }
        entries.push(e);
        good_len += n as u64;
    }
    let file = OpenOptions::new().write(true).open(path)?;
    if file.metadata()?.len() != good_len {
        file.set_len(good_len)?;
    }
    Ok(entries)
}

impl ChannelStore {
    /// Opens (or creates) the record logs for `channels` under `data_dir`.
    pub fn open(
        data_dir: &Path,
        channels: &[ChannelConfig],
        min_interval: Duration,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StoreError> {
        std::fs::create_dir_all(data_dir).map_err(|source| StoreError::Log { path: data_dir.to_path_buf(), source })?;
        let mut map = HashMap::new();
        let mut by_write_key = HashMap::new();
        let now = clock.now();
        for c in channels {
            if map.contains_key(&c.id) {
                return Err(StoreError::Config { id: c.id, message: "configured twice".into() });
            }
            if let Some(other) = by_write_key.insert(c.write_key.clone(), c.id) {
                return Err(StoreError::Config { id: c.id, message: format!("write key shared with channel {other}") });
            }
            let path = log_path(data_dir, c.id);
            let log_err = |source| StoreError::Log { path: path.clone(), source };
            let entries = replay(&path).map_err(log_err)?;
            let log = OpenOptions::new().create(true).append(true).open(&path).map_err(log_err)?;
            let created_at = entries.first().map_or(now, |e| e.created_at);
            map.insert(c.id, Mutex::new(Channel { config: c.clone(), created_at, entries, log, log_path: path }));
        }
        Ok(Self {
            channels: map,
            by_write_key,
            min_interval: TimeDelta::from_std(min_interval).expect("interval in range"),
            clock,
        })
    }

    pub fn min_interval(&self) -> Duration {
        self.min_interval.to_std().expect("non-negative interval")
    }

    /// Handles one update given its decoded parameters.
    pub fn ingest<K, V>(&self, params: &[(K, V)]) -> Result<IngestOutcome, StoreError>
    where
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut api_key = None;
        let mut fields: [Option<String>; FIELD_COUNT] = Default::default();
        for (k, v) in params {
            let (k, v) = (k.as_ref(), v.as_ref());
            if k == "api_key" {
                api_key = Some(v);
            } else if let Some(idx) = k.strip_prefix("field").and_then(|n| n.parse::<usize>().ok()) {
                if !(1..=FIELD_COUNT).contains(&idx) {
                    return Err(StoreError::Malformed(format!("no such field {k}")));
                }
                match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => fields[idx - 1] = Some(v.to_string()),
                    _ => return Err(StoreError::Malformed(format!("{k}={v:?} is not a number"))),
                }
            }
        }
        let api_key = api_key.ok_or_else(|| StoreError::Malformed("missing api_key".into()))?;
        let id = *self.by_write_key.get(api_key).ok_or(StoreError::Unauthorized)?;
        if fields.iter().all(Option::is_none) {
            return Err(StoreError::Malformed("no fields".into()));
        }

        let mut ch = self.channels[&id].lock().expect("channel lock poisoned");
        // Read the clock under the lock so accepted entries are time-ordered.
        let now = self.clock.now();
        if let Some(last) = ch.entries.last() {
            if now - last.created_at < self.min_interval {
                return Ok(IngestOutcome::RateLimited);
            }
        }
        let entry = Entry { entry_id: ch.entries.len() as u64 + 1, created_at: now, fields };
        let mut line = serde_json::to_vec(&entry).expect("entry serializes");
        line.push(b'\n');
        let path = ch.log_path.clone();
        ch.log.write_all(&line).map_err(|source| StoreError::Log { path, source })?;
        let id = entry.entry_id;
        ch.entries.push(entry);
        Ok(IngestOutcome::Stored(id))
    }

    /// The last `results` entries in ascending order, plus channel metadata.
    /// A channel with a read key requires it.
    pub fn feed(
        &self,
        id: u64,
        results: usize,
        api_key: Option<&str>,
    ) -> Result<(ChannelInfo, Vec<Entry>), StoreError> {
        let ch = self.channels.get(&id).ok_or(StoreError::UnknownChannel(id))?;
        let ch = ch.lock().expect("channel lock poisoned");
        if let Some(rk) = &ch.config.read_key {
            if api_key != Some(rk.as_str()) {
                return Err(StoreError::Unauthorized);
            }
        }
        let start = ch.entries.len().saturating_sub(results);
        let info = ChannelInfo {
            id,
            name: format!("channel {id}"),
            created_at: ch.created_at,
            updated_at: ch.entries.last().map(|e| e.created_at),
            last_entry_id: ch.entries.last().map(|e| e.entry_id),
        };
        Ok((info, ch.entries[start..].to_vec()))
    }

    /// Forces every record log to stable storage.
    pub fn flush(&self) -> Result<(), StoreError> {
        for ch in self.channels.values() {
            let ch = ch.lock().expect("channel lock poisoned");
            ch.log.sync_all().map_err(|source| StoreError::Log { path: ch.log_path.clone(), source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn clock() -> ManualClock {
        ManualClock::new(Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap())
    }

    fn store(dir: &Path, clock: &ManualClock) -> ChannelStore {
        let channels = ["1:W1".parse().unwrap(), "2:W2:R2".parse().unwrap()];
        ChannelStore::open(dir, &channels, DEFAULT_MIN_INTERVAL, Arc::new(clock.clone())).unwrap()
    }

    fn update(key: &str, v: &str) -> Vec<(String, String)> {
        vec![("api_key".into(), key.into()), ("field1".into(), v.into())]
    }

    #[test]
    fn rate_limit_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let c = clock();
        let s = store(dir.path(), &c);
        assert_eq!(s.ingest(&update("W1", "1.000")).unwrap(), IngestOutcome::Stored(1));
        c.advance(Duration::from_secs(10));
        assert_eq!(s.ingest(&update("W1", "2.000")).unwrap(), IngestOutcome::RateLimited);
        c.advance(Duration::from_secs(5));
        assert_eq!(s.ingest(&update("W1", "3.000")).unwrap(), IngestOutcome::Stored(2));
        c.advance(Duration::from_millis(14_999));
        assert_eq!(s.ingest(&update("W1", "4.000")).unwrap().body(), "0");
        let (_, feed) = s.feed(1, 10, None).unwrap();
        let vals: Vec<_> = feed.iter().map(|e| e.fields[0].clone().unwrap()).collect();
        assert_eq!(vals, ["1.000", "3.000"]);
    }

    #[test]
    fn rejects_bad_requests() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), &clock());
        assert!(matches!(s.ingest(&update("nope", "1")), Err(StoreError::Unauthorized)));
        assert!(matches!(s.ingest(&update("W1", "abc")), Err(StoreError::Malformed(_))));
        assert!(matches!(s.ingest(&update("W1", "NaN")), Err(StoreError::Malformed(_))));
        assert!(matches!(s.ingest(&[("field1", "1")]), Err(StoreError::Malformed(_))));
        assert!(matches!(s.ingest(&[("api_key", "W1"), ("field9", "1")]), Err(StoreError::Malformed(_))));
        assert!(matches!(s.ingest(&[("api_key", "W1")]), Err(StoreError::Malformed(_))));
        assert!(matches!(s.feed(7, 1, None), Err(StoreError::UnknownChannel(7))));
        assert!(matches!(s.feed(2, 1, None), Err(StoreError::Unauthorized)));
        assert!(s.feed(2, 1, Some("R2")).unwrap().1.is_empty());
    }

    #[test]
    fn feed_window_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let c = clock();
        let s = store(dir.path(), &c);
        for k in 0..3 {
            s.ingest(&update("W1", &format!("{k}"))).unwrap();
            c.advance(Duration::from_secs(15));
        }
        assert!(s.feed(1, 0, None).unwrap().1.is_empty());
        let ids: Vec<u64> = s.feed(1, 99, None).unwrap().1.iter().map(|e| e.entry_id).collect();
        assert_eq!(ids, [1, 2, 3]);
        let ids: Vec<u64> = s.feed(1, 2, None).unwrap().1.iter().map(|e| e.entry_id).collect();
        assert_eq!(ids, [2, 3]);
    }

    #[test]
    fn replay_restores_entries_and_rate_limit() {
        let dir = tempfile::tempdir().unwrap();
        let c = clock();
        {
            let s = store(dir.path(), &c);
            s.ingest(&update("W1", "5.500")).unwrap();
            c.advance(Duration::from_secs(20));
            s.ingest(&update("W1", "6.500")).unwrap();
        }
        // Simulate a write torn by a crash.
        let path = log_path(dir.path(), 1);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"entry_id\":3,\"crea").unwrap();
        drop(f);

        c.advance(Duration::from_secs(5));
        let s = store(dir.path(), &c);
        let (info, feed) = s.feed(1, 10, None).unwrap();
        assert_eq!(info.last_entry_id, Some(2));
        assert_eq!(feed[1].fields[0].as_deref(), Some("6.500"));
        assert_eq!(s.ingest(&update("W1", "7")).unwrap(), IngestOutcome::RateLimited);
        c.advance(Duration::from_secs(10));
        assert_eq!(s.ingest(&update("W1", "7")).unwrap(), IngestOutcome::Stored(3));
        drop(s);
        let s = store(dir.path(), &c);
        assert_eq!(s.feed(1, 10, None).unwrap().1.len(), 3);
    }

    #[test]
    fn channel_config_parsing() {
        let c: ChannelConfig = "3:abc:def".parse().unwrap();
        assert_eq!(c, ChannelConfig { id: 3, write_key: "abc".into(), read_key: Some("def".into()) });
        assert_eq!("4:k".parse::<ChannelConfig>().unwrap().read_key, None);
        for bad in ["", "x:k", "0:k", "1", "1:", "1:a:b:c"] {
            assert!(bad.parse::<ChannelConfig>().is_err(), "{bad}");
        }
    }
}
