//! Non-blocking sample hand-off from the simulation loop to slow consumers.
//!
//! The producer side never waits on the consumer. Samples go to a bounded
//! in-memory queue; once that is full they are appended to a spill file and
//! read back in order when the consumer catches up. Nothing is dropped.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use crate::sim::SimSample;

struct Spill {
    file: File,
    /// Byte offset of the next unread record.
    read_pos: u64,
    pending: usize,
}

struct Inner {
    memory: VecDeque<SimSample>,
    spill: Spill,
    closed: bool,
    spilled_total: usize,
}

struct Shared {
    capacity: usize,
    inner: Mutex<Inner>,
    ready: Condvar,
}

pub struct SampleSender {
    shared: Arc<Shared>,
}

pub struct SampleReceiver {
    shared: Arc<Shared>,
}

/// Creates a hand-off holding up to `capacity` samples in memory and spilling
/// the overflow to an anonymous temporary file under `spill_dir`.
pub fn channel(capacity: usize, spill_dir: &Path) -> io::Result<(SampleSender, SampleReceiver)> {
    let file = tempfile::tempfile_in(spill_dir)?;
    let shared = Arc::new(Shared {
        capacity: capacity.max(1),
        inner: Mutex::new(Inner {
            memory: VecDeque::new(),
            spill: Spill { file, read_pos: 0, pending: 0 },
            closed: false,
            spilled_total: 0,
        }),
        ready: Condvar::new(),
    });
    Ok((SampleSender { shared: shared.clone() }, SampleReceiver { shared }))
}

impl SampleSender {
    /// Queues a sample without waiting for the consumer.
    pub fn send(&self, sample: &SimSample) -> io::Result<()> {
        let mut inner = self.shared.inner.lock().expect("hand-off lock poisoned");
        // Once anything is on disk, later samples must follow it there.
        if inner.spill.pending == 0 && inner.memory.len() < self.shared.capacity {
            inner.memory.push_back(*sample);
        } else {
            let mut line = serde_json::to_vec(sample).map_err(io::Error::other)?;
            line.push(b'\n');
            let spill = &mut inner.spill;
            spill.file.seek(SeekFrom::End(0))?;
            spill.file.write_all(&line)?;
            spill.pending += 1;
            inner.spilled_total += 1;
        }
        drop(inner);
        self.shared.ready.notify_one();
        Ok(())
    }

    /// Number of samples that have gone through the spill file so far.
    pub fn spilled(&self) -> usize {
        self.shared.inner.lock().expect("hand-off lock poisoned").spilled_total
    }
}

impl Drop for SampleSender {
    fn drop(&mut self) {
        if let Ok(mut inner) = self.shared.inner.lock() {
            inner.closed = true;
        }
        self.shared.ready.notify_all();
    }
}

impl SampleReceiver {
    /// Blocks until a sample is available; `Ok(None)` once the sender is gone
    /// and everything has been drained.
    pub fn recv(&self) -> io::Result<Option<SimSample>> {
        let mut inner = self.shared.inner.lock().expect("hand-off lock poisoned");
        loop {
            if let Some(s) = inner.memory.pop_front() {
                return Ok(Some(s));
            }
            if inner.spill.pending > 0 {
                let batch = self.shared.capacity;
                refill(&mut inner, batch)?;
                continue;
            }
            if inner.closed {
                return Ok(None);
            }
            inner = self.shared.ready.wait(inner).expect("hand-off lock poisoned");
        }
    }
}

impl Iterator for SampleReceiver {
    type Item = io::Result<SimSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.recv().transpose()
    }
}

/// Moves up to `batch` spilled samples back into memory.
fn refill(inner: &mut Inner, batch: usize) -> io::Result<()> {
    let spill = &mut inner.spill;
    spill.file.seek(SeekFrom::Start(spill.read_pos))?;
    let mut reader = BufReader::new(&mut spill.file);
    let mut line = String::new();
    let mut consumed = 0u64;
    let mut loaded = 0;
    while loaded < batch && loaded < spill.pending {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "spill file truncated"));
        }
        consumed += n as u64;
        let sample: SimSample = serde_json::from_str(line.trim_end()).map_err(io::Error::other)?;
        inner.memory.push_back(sample);
        loaded += 1;
    }
    drop(reader);
    spill.read_pos += consumed;
    spill.pending -= loaded;
    if spill.pending == 0 {
        spill.file.set_len(0)?;
        spill.read_pos = 0;
    }
    Ok(())
}
