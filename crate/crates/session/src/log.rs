//! Session log: newline-delimited JSON, one record per line.
//!
//! The first line is a header carrying the format name, version, session
//! id, seed and a full config snapshot. Every following line is an event
//! with a sequence number (0, 1, 2, ...) and the device clock in ms.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use hapsy_core::ExperimentConfig;

use crate::engine::{EventBody, Stamped};

pub const LOG_FORMAT: &str = "hapsy-session-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub session_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl LogHeader {
    pub fn new(session_id: &str, seed: u64, config: ExperimentConfig) -> Self {
        Self { format: LOG_FORMAT.into(), version: LOG_VERSION, session_id: session_id.into(), seed, config }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: u64,
    pub t_ms: u64,
    pub event: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum LogRecord {
    Header(LogHeader),
    Event(LogEvent),
}

/// Structural or semantic failure while reading a log. Every variant
/// carries the byte offset up to which the log was valid.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("empty log")]
    Empty,
    #[error("truncated record at byte {last_valid_offset}")]
    Truncated { last_valid_offset: usize },
    #[error("unreadable record at byte {offset}: {message}")]
    Corrupt { offset: usize, last_valid_offset: usize, message: String },
    #[error("first record is not a header")]
    MissingHeader,
    #[error("unsupported log format {format} v{version}")]
    UnsupportedVersion { format: String, version: u32 },
    #[error("sequence gap at byte {offset}: expected {expected}, found {found}")]
    SequenceGap { offset: usize, last_valid_offset: usize, expected: u64, found: u64 },
    #[error("clock went backwards at byte {offset}")]
    ClockDisorder { offset: usize, last_valid_offset: usize },
    #[error("event {seq} at byte {offset} differs from the replayed result")]
    Divergence { seq: u64, offset: usize, last_valid_offset: usize },
    #[error("event group starting at byte {offset} is incomplete")]
    IncompleteGroup { offset: usize, last_valid_offset: usize },
    #[error("input {seq} at byte {offset} was rejected on replay: {message}")]
    RejectedInput { seq: u64, offset: usize, last_valid_offset: usize, message: String },
    #[error("session could not be constructed from the header: {0}")]
    BadHeader(String),
}

impl ReplayError {
    /// Bytes of the log known to be valid.
    pub fn last_valid_offset(&self) -> usize {
        use ReplayError::*;
        match self {
            Empty | MissingHeader | UnsupportedVersion { .. } | BadHeader(_) => 0,
            Truncated { last_valid_offset }
            | Corrupt { last_valid_offset, .. }
            | SequenceGap { last_valid_offset, .. }
            | ClockDisorder { last_valid_offset, .. }
            | Divergence { last_valid_offset, .. }
            | IncompleteGroup { last_valid_offset, .. }
            | RejectedInput { last_valid_offset, .. } => *last_valid_offset,
        }
    }
}

/// A log record with its byte span.
#[derive(Debug, Clone, PartialEq)]
pub struct Located<T> {
    pub offset: usize,
    pub end: usize,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub header: LogHeader,
    pub header_end: usize,
    pub events: Vec<Located<LogEvent>>,
}

/// Parse a log up to the first structural problem. Returns the valid prefix
/// (if a header was read) and the problem, if any.
pub fn parse_log(bytes: &[u8]) -> (Option<ParsedLog>, Option<ReplayError>) {
    if bytes.is_empty() {
        return (None, Some(ReplayError::Empty));
    }
    let mut parsed: Option<ParsedLog> = None;
    let mut offset = 0;
    let mut last_t = 0;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return (parsed, Some(ReplayError::Truncated { last_valid_offset: offset }));
        };
        let end = offset + nl + 1;
        let record: LogRecord = match serde_json::from_slice(&bytes[offset..end - 1]) {
            Ok(r) => r,
            Err(e) => {
                let err = ReplayError::Corrupt { offset, last_valid_offset: offset, message: e.to_string() };
                return (parsed, Some(err));
            }
        };
        match (record, parsed.as_mut()) {
            (LogRecord::Header(header), None) => {
                if header.format != LOG_FORMAT || header.version != LOG_VERSION {
                    let err = ReplayError::UnsupportedVersion { format: header.format, version: header.version };
                    return (None, Some(err));
                }
                parsed = Some(ParsedLog { header, header_end: end, events: Vec::new() });
            }
            (LogRecord::Event(_), None) => return (None, Some(ReplayError::MissingHeader)),
            (LogRecord::Header(_), Some(_)) => {
                let err = ReplayError::Corrupt { offset, last_valid_offset: offset, message: "second header".into() };
                return (parsed, Some(err));
            }
            (LogRecord::Event(event), Some(log)) => {
                let expected = log.events.len() as u64;
                if event.seq != expected {
                    let err =
                        ReplayError::SequenceGap { offset, last_valid_offset: offset, expected, found: event.seq };
                    return (parsed, Some(err));
                }
                if event.t_ms < last_t {
                    return (parsed, Some(ReplayError::ClockDisorder { offset, last_valid_offset: offset }));
                }
                last_t = event.t_ms;
                log.events.push(Located { offset, end, value: event });
            }
        }
        offset = end;
    }
    (parsed, None)
}

pub fn encode_record(record: &LogRecord) -> Vec<u8> {
    let mut line = serde_json::to_vec(record).expect("log records serialize");
    line.push(b'\n');
    line
}

/// Durable append target. `append` returns only once the bytes are stored.
pub trait LogSink: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
}

impl<S: LogSink + ?Sized> LogSink for Box<S> {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        (**self).append(bytes)
    }
}

/// Append-only file. With `sync` every append is flushed to disk.
pub struct FileSink {
    file: File,
    sync: bool,
}

impl FileSink {
    pub fn create(path: &Path, sync: bool) -> io::Result<Self> {
        let file = OpenOptions::new().create_new(true).append(true).open(path)?;
        Ok(Self { file, sync })
    }

    /// Reopen an existing log for appending after truncating it to `len`.
    pub fn reopen(path: &Path, len: u64, sync: bool) -> io::Result<Self> {
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(len)?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file, sync })
    }
}

impl LogSink for FileSink {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// In-memory log shared with the caller.
#[derive(Debug, Clone, Default)]
pub struct MemorySink(Arc<Mutex<Vec<u8>>>);

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().expect("sink lock").clone()
    }
}

impl LogSink for MemorySink {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.lock().expect("sink lock").extend_from_slice(bytes);
        Ok(())
    }
}

/// Test sink that stores at most `budget` bytes and then fails, leaving a
/// torn write behind, as a process killed mid-write would.
pub struct CrashingSink<S> {
    pub inner: S,
    pub budget: usize,
}

impl<S: LogSink> LogSink for CrashingSink<S> {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        if bytes.len() <= self.budget {
            self.budget -= bytes.len();
            return self.inner.append(bytes);
        }
        let torn = self.budget;
        self.budget = 0;
        self.inner.append(&bytes[..torn])?;
        Err(io::Error::other("injected crash"))
    }
}

/// Serializes records and numbers events.
pub struct LogWriter {
    sink: Box<dyn LogSink>,
    next_seq: u64,
}

impl LogWriter {
    /// Writer positioned after `next_seq - 1` events.
    pub fn new(sink: Box<dyn LogSink>, next_seq: u64) -> Self {
        Self { sink, next_seq }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn write_header(&mut self, header: &LogHeader) -> io::Result<()> {
        self.sink.append(&encode_record(&LogRecord::Header(header.clone())))
    }

    /// Write an event group in one append. Sequence numbers advance only
    /// if the append succeeds.
    pub fn write_group(&mut self, group: Vec<Stamped>) -> io::Result<Vec<LogEvent>> {
        let events: Vec<LogEvent> = group
            .into_iter()
            .enumerate()
            .map(|(i, (t_ms, event))| LogEvent { seq: self.next_seq + i as u64, t_ms, event })
            .collect();
        let mut buf = Vec::new();
        for e in &events {
            buf.extend(encode_record(&LogRecord::Event(e.clone())));
        }
        self.sink.append(&buf)?;
        self.next_seq += events.len() as u64;
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Phase;

    fn sample_log() -> Vec<u8> {
        let sink = MemorySink::new();
        let mut w = LogWriter::new(Box::new(sink.clone()), 0);
        w.write_header(&LogHeader::new("s1", 3, ExperimentConfig::default())).unwrap();
        w.write_group(vec![(0, EventBody::Phase { from: None, to: Phase::Asr })]).unwrap();
        w.write_group(vec![(5, EventBody::Aborted { reason: "x".into() })]).unwrap();
        sink.contents()
    }

    #[test]
    fn round_trips() {
        let bytes = sample_log();
        let (log, err) = parse_log(&bytes);
        assert_eq!(err, None);
        let log = log.unwrap();
        assert_eq!(log.header.seed, 3);
        assert_eq!(log.header.config, ExperimentConfig::default());
        assert_eq!(log.events.len(), 2);
        assert_eq!(log.events[1].end, bytes.len());
    }

    #[test]
    fn torn_tail_reports_offset() {
        let bytes = sample_log();
        let cut = bytes.len() - 3;
        let (log, err) = parse_log(&bytes[..cut]);
        let start_of_last = log.unwrap().events[0].end;
        assert_eq!(err, Some(ReplayError::Truncated { last_valid_offset: start_of_last }));
    }

    #[test]
    fn removed_event_is_a_gap() {
        let bytes = sample_log();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let without = format!("{}\n{}\n", lines[0], lines[2]);
        let (_, err) = parse_log(without.as_bytes());
        assert!(matches!(err, Some(ReplayError::SequenceGap { expected: 0, found: 1, .. })), "{err:?}");
    }

    #[test]
    fn crashing_sink_tears_the_write() {
        let inner = MemorySink::new();
        let mut sink = CrashingSink { inner: inner.clone(), budget: 4 };
        assert!(sink.append(b"abc").is_ok());
        assert!(sink.append(b"defg").is_err());
        assert_eq!(inner.contents(), b"abcd");
    }

    #[test]
    fn version_is_checked() {
        let mut h = LogHeader::new("s", 0, ExperimentConfig::default());
        h.version = 99;
        let bytes = encode_record(&LogRecord::Header(h));
        let (_, err) = parse_log(&bytes);
        assert!(matches!(err, Some(ReplayError::UnsupportedVersion { version: 99, .. })));
    }
}
