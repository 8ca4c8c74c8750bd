//! Append-only trace store. Each record is a 4-byte big-endian body length,
//! a 4-byte big-endian CRC32 of the body, then the JSON body.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::RolloutKey;
use crate::message::monotonic_timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    Submitted,
    Assigned,
    StepCompleted,
    ToolExecuted,
    Completed,
    Failed,
    Reassigned,
    HeartbeatMissed,
    PolicySync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: TraceKind,
    pub task_id: Option<String>,
    pub rollout_index: Option<u32>,
    pub worker_id: Option<String>,
    pub payload: Value,
    pub timestamp: f64,
}

impl TraceEvent {
    pub fn key(&self) -> Option<RolloutKey> {
        match (&self.task_id, self.rollout_index) {
            (Some(t), Some(r)) => Some(RolloutKey::new(t, r)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace store halted: {0}")]
    Halted(String),
}

/// Where a log stops being valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    /// Byte offset of the first invalid record.
    pub offset: u64,
    /// Seq of the last valid record, if any.
    pub last_valid_seq: Option<u64>,
    pub reason: String,
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.last_valid_seq {
            Some(seq) => write!(f, "invalid record at byte {} after seq {}: {}", self.offset, seq, self.reason),
            None => write!(f, "invalid record at byte {} (no valid records): {}", self.offset, self.reason),
        }
    }
}

enum Sink {
    Memory(Vec<u8>),
    File(File),
    Writer(Box<dyn Write + Send>),
}

struct Inner {
    sink: Sink,
    next_seq: u64,
    events: Vec<TraceEvent>,
    halted: Option<String>,
    crash_at: Option<u64>,
}

/// Serializes all appends through one lock. After the first failed write
/// the store refuses every further append (fail-stop), so the log never
/// contains a gap.
pub struct TraceStore {
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for TraceStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("TraceStore")
            .field("next_seq", &inner.next_seq)
            .field("halted", &inner.halted)
            .finish()
    }
}

impl TraceStore {
    fn with_sink(sink: Sink, events: Vec<TraceEvent>) -> Self {
        let next_seq = events.last().map_or(1, |e| e.seq + 1);
        TraceStore { inner: Mutex::new(Inner { sink, next_seq, events, halted: None, crash_at: None }) }
    }

    pub fn in_memory() -> Self {
        Self::with_sink(Sink::Memory(Vec::new()), Vec::new())
    }

    /// Appends go to an arbitrary writer (used to inject storage faults).
    pub fn to_writer(writer: Box<dyn Write + Send>) -> Self {
        Self::with_sink(Sink::Writer(writer), Vec::new())
    }

    /// A fresh, empty trace file.
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self::with_sink(Sink::File(file), Vec::new()))
    }

    /// Opens an existing trace for continued appending. A corrupt tail is
    /// cut off so new records follow the last valid one.
    pub fn resume(path: &Path) -> io::Result<(Self, Option<Corruption>)> {
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (events, valid_len, corruption) = decode_trace(&bytes);
        if valid_len < bytes.len() {
            file.set_len(valid_len as u64)?;
        }
        file.seek(SeekFrom::Start(valid_len as u64))?;
        Ok((Self::with_sink(Sink::File(file), events), corruption))
    }

    /// Simulates a coordinator crash: the append that would receive `seq`
    /// is dropped and the store halts.
    pub fn crash_at_seq(&self, seq: u64) {
        self.inner.lock().crash_at = Some(seq);
    }

    /// Appends one event and returns it with its assigned seq.
    pub fn record(
        &self,
        kind: TraceKind,
        key: Option<&RolloutKey>,
        worker_id: Option<&str>,
        payload: Value,
    ) -> Result<TraceEvent, TraceError> {
        let mut inner = self.inner.lock();
        if let Some(reason) = &inner.halted {
            return Err(TraceError::Halted(reason.clone()));
        }
        let seq = inner.next_seq;
        if inner.crash_at == Some(seq) {
            let reason = format!("simulated crash before seq {seq}");
            inner.halted = Some(reason.clone());
            return Err(TraceError::Halted(reason));
        }
        let event = TraceEvent {
            seq,
            kind,
            task_id: key.map(|k| k.task_id.clone()),
            rollout_index: key.map(|k| k.rollout_index),
            worker_id: worker_id.map(str::to_string),
            payload,
            timestamp: monotonic_timestamp(),
        };
        let record = encode_record(&event);
        let written = match &mut inner.sink {
            Sink::Memory(buf) => {
                buf.extend_from_slice(&record);
                Ok(())
            }
            Sink::File(file) => file.write_all(&record).and_then(|_| file.flush()),
            Sink::Writer(w) => w.write_all(&record).and_then(|_| w.flush()),
        };
        if let Err(e) = written {
            let reason = format!("append of seq {seq} failed: {e}");
            tracing::error!(%reason, "trace store halting");
            inner.halted = Some(reason.clone());
            return Err(TraceError::Halted(reason));
        }
        inner.next_seq += 1;
        inner.events.push(event.clone());
        Ok(event)
    }

    pub fn is_halted(&self) -> bool {
        self.inner.lock().halted.is_some()
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.inner.lock().events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The encoded log, for in-memory stores.
    pub fn memory_bytes(&self) -> Option<Vec<u8>> {
        match &self.inner.lock().sink {
            Sink::Memory(buf) => Some(buf.clone()),
            _ => None,
        }
    }
}

pub fn encode_record(event: &TraceEvent) -> Vec<u8> {
    let body = serde_json::to_vec(event).expect("trace events serialize");
    let mut out = Vec::with_capacity(8 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes the longest valid prefix. Returns the events, the byte length of
/// that prefix, and where decoding stopped if the input has an invalid tail.
pub fn decode_trace(bytes: &[u8]) -> (Vec<TraceEvent>, usize, Option<Corruption>) {
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut pos = 0usize;
    let corrupt = |pos: usize, events: &[TraceEvent], reason: String| Corruption {
        offset: pos as u64,
        last_valid_seq: events.last().map(|e| e.seq),
        reason,
    };
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return (events.clone(), pos, Some(corrupt(pos, &events, "truncated record header".into())));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_be_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        if bytes.len() - pos - 8 < len {
            return (events.clone(), pos, Some(corrupt(pos, &events, "truncated record body".into())));
        }
        let body = &bytes[pos + 8..pos + 8 + len];
        if crc32fast::hash(body) != crc {
            return (events.clone(), pos, Some(corrupt(pos, &events, "checksum mismatch".into())));
        }
        let event: TraceEvent = match serde_json::from_slice(body) {
            Ok(e) => e,
            Err(e) => return (events.clone(), pos, Some(corrupt(pos, &events, format!("bad record: {e}")))),
        };
        if let Some(last) = events.last() {
            if event.seq <= last.seq {
                let reason = format!("seq {} does not follow {}", event.seq, last.seq);
                return (events.clone(), pos, Some(corrupt(pos, &events, reason)));
            }
        }
        events.push(event);
        pos += 8 + len;
    }
    (events, pos, None)
}

pub fn read_trace(path: &Path) -> io::Result<(Vec<TraceEvent>, Option<Corruption>)> {
    let bytes = std::fs::read(path)?;
    let (events, _, corruption) = decode_trace(&bytes);
    Ok((events, corruption))
}

/// Checks the log invariants: strictly increasing seq, and every terminal
/// event preceded by an assignment of the same rollout.
pub fn check_trace(events: &[TraceEvent]) -> Result<(), String> {
    let mut assigned = BTreeSet::new();
    let mut last = 0;
    for e in events {
        if e.seq <= last {
            return Err(format!("seq {} after {}", e.seq, last));
        }
        last = e.seq;
        match e.kind {
            TraceKind::Assigned => {
                assigned.insert(e.key().ok_or_else(|| format!("seq {}: assignment without rollout", e.seq))?);
            }
            TraceKind::Completed | TraceKind::Failed => {
                let key = e.key().ok_or_else(|| format!("seq {}: terminal event without rollout", e.seq))?;
                if !assigned.contains(&key) {
                    return Err(format!("seq {}: {key} completed without an assignment", e.seq));
                }
            }
            _ => {}
        }
    }
    Ok(())
}
