//! A live session: engine plus write-ahead log.

use thiserror::Error;

use hapsy_core::ExperimentConfig;

use crate::engine::{Engine, EngineError, ProtocolError, Submission};
use crate::log::{LogEvent, LogHeader, LogSink, LogWriter, ReplayError};
use crate::replay::Replayed;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
    #[error("replay: {0}")]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submitted {
    /// The token had already been accepted; nothing was logged.
    pub duplicate: bool,
    pub events: Vec<LogEvent>,
}

pub struct Session {
    id: String,
    engine: Engine,
    writer: LogWriter,
}

impl Session {
    /// Build the engine and persist header and opening events before
    /// returning.
    pub fn create(
        id: &str,
        config: ExperimentConfig,
        seed: u64,
        sink: Box<dyn LogSink>,
    ) -> Result<(Self, Vec<LogEvent>), SessionError> {
        let (engine, opening) = Engine::new(config.clone(), seed)?;
        let mut writer = LogWriter::new(sink, 0);
        writer.write_header(&LogHeader::new(id, seed, config))?;
        let events = writer.write_group(opening)?;
        Ok((Self { id: id.into(), engine, writer }, events))
    }

    /// Continue a recovered session; `sink` appends after the valid prefix.
    pub fn resume(replayed: Replayed, sink: Box<dyn LogSink>) -> Self {
        Self {
            id: replayed.header.session_id.clone(),
            engine: replayed.engine,
            writer: LogWriter::new(sink, replayed.next_seq),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn next_seq(&self) -> u64 {
        self.writer.next_seq()
    }

    /// Apply a submission. The new state becomes visible only after its
    /// event group is stored; on any error the session is unchanged.
    pub fn submit(&mut self, sub: &Submission) -> Result<Submitted, SessionError> {
        if self.engine.has_token(&sub.token) {
            return Ok(Submitted { duplicate: true, events: Vec::new() });
        }
        let mut next = self.engine.clone();
        let group = next.apply(sub)?;
        let events = self.writer.write_group(group)?;
        self.engine = next;
        Ok(Submitted { duplicate: false, events })
    }
}
