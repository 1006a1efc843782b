//! Many concurrent sessions, each behind its own writer lock. Readers get
//! lock-free snapshots; subscribers get every logged event.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use hapsy_core::ExperimentConfig;

use crate::engine::{EngineView, Phase, SessionExports, SessionSummary, Submission};
use crate::log::{FileSink, LogEvent, LogSink, MemorySink};
use crate::replay::recover_log;
use crate::session::{Session, SessionError, Submitted};

pub const INDEX_FILE: &str = "index.ndjson";
const EVENT_BUFFER: usize = 1024;

/// One line of the store index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub session_id: String,
    pub client_token: Option<String>,
    pub token: String,
    pub log_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    /// Sequence number of the last event reflected here.
    pub last_seq: u64,
    pub view: EngineView,
    pub summary: SessionSummary,
}

pub struct SessionHandle {
    pub id: String,
    token: String,
    writer: Mutex<Session>,
    memory_log: Option<MemorySink>,
    log_path: Option<PathBuf>,
    snapshot: ArcSwap<SessionSnapshot>,
    events: broadcast::Sender<Arc<LogEvent>>,
}

fn snapshot_of(session: &Session) -> SessionSnapshot {
    let engine = session.engine();
    SessionSnapshot {
        session_id: session.id().to_string(),
        last_seq: session.next_seq().saturating_sub(1),
        view: engine.view(),
        summary: engine.summary(),
    }
}

impl SessionHandle {
    fn new(session: Session, token: String, memory_log: Option<MemorySink>, log_path: Option<PathBuf>) -> Self {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Self {
            id: session.id().to_string(),
            token,
            snapshot: ArcSwap::from_pointee(snapshot_of(&session)),
            writer: Mutex::new(session),
            memory_log,
            log_path,
            events,
        }
    }

    pub fn check_token(&self, token: &str) -> bool {
        token == self.token
    }

    pub fn snapshot(&self) -> Arc<SessionSnapshot> {
        self.snapshot.load_full()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<LogEvent>> {
        self.events.subscribe()
    }

    /// Serialized through the session's writer lock.
    pub fn submit(&self, sub: &Submission) -> Result<Submitted, SessionError> {
        let mut session = self.writer.lock().expect("session lock");
        let done = session.submit(sub)?;
        if !done.duplicate {
            self.snapshot.store(Arc::new(snapshot_of(&session)));
            for e in &done.events {
                // No subscribers is fine.
                let _ = self.events.send(Arc::new(e.clone()));
            }
        }
        Ok(done)
    }

    pub fn exports(&self) -> SessionExports {
        self.writer.lock().expect("session lock").engine().exports()
    }

    /// Raw log bytes as stored.
    pub fn log_bytes(&self) -> io::Result<Vec<u8>> {
        // Hold the writer so that no group is half-written.
        let _guard = self.writer.lock().expect("session lock");
        match (&self.memory_log, &self.log_path) {
            (Some(m), _) => Ok(m.contents()),
            (None, Some(p)) => fs::read(p),
            (None, None) => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Created {
    pub session_id: String,
    pub token: String,
    pub phase: Phase,
    /// The client token had been used before; this is the earlier session.
    pub existing: bool,
}

/// Session registry. With a root directory, logs and the index are files
/// and survive restarts; otherwise everything is in memory.
pub struct SessionStore {
    root: Option<PathBuf>,
    sync: bool,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    client_tokens: Mutex<HashMap<String, String>>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self { root: None, sync: false, sessions: RwLock::default(), client_tokens: Mutex::default() }
    }

    /// Open (or create) a store under `root`, recovering every indexed
    /// session from its log.
    pub fn open(root: &Path, sync: bool) -> Result<Self, SessionError> {
        fs::create_dir_all(root)?;
        let store = Self { root: Some(root.to_path_buf()), sync, ..Self::in_memory() };
        let index = root.join(INDEX_FILE);
        if index.exists() {
            for line in BufReader::new(File::open(&index)?).lines() {
                let line = line?;
                // A torn last index line belongs to a create that never
                // returned.
                let Ok(entry) = serde_json::from_str::<IndexEntry>(&line) else { continue };
                let path = root.join(&entry.log_file);
                let Ok(bytes) = fs::read(&path) else { continue };
                let replayed = match recover_log(&bytes) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("skipping session {}: {e}", entry.session_id);
                        continue;
                    }
                };
                let sink = FileSink::reopen(&path, replayed.valid_len as u64, sync)?;
                let session = Session::resume(replayed, Box::new(sink));
                let handle = SessionHandle::new(session, entry.token.clone(), None, Some(path));
                if let Some(ct) = &entry.client_token {
                    store.client_tokens.lock().expect("token lock").insert(ct.clone(), entry.session_id.clone());
                }
                store.sessions.write().expect("sessions lock").insert(entry.session_id, Arc::new(handle));
            }
        }
        Ok(store)
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().expect("sessions lock").get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("sessions lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Create a session, or return the earlier one for a reused client
    /// token. The session is persisted before this returns.
    pub fn create(
        &self,
        config: ExperimentConfig,
        seed: Option<u64>,
        client_token: Option<String>,
    ) -> Result<Created, SessionError> {
        // Held across creation so that two racing creates with one token
        // yield one session.
        let mut tokens = self.client_tokens.lock().expect("token lock");
        if let Some(id) = client_token.as_ref().and_then(|t| tokens.get(t)) {
            let handle = self.get(id).expect("indexed session exists");
            return Ok(Created {
                session_id: id.clone(),
                token: handle.token.clone(),
                phase: handle.snapshot().view.phase,
                existing: true,
            });
        }
        config.validate().map_err(crate::engine::EngineError::from)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let token = uuid::Uuid::new_v4().simple().to_string();
        let seed = seed.unwrap_or(config.seed);
        let log_file = format!("{id}.ndjson");
        let (sink, memory, path): (Box<dyn LogSink>, _, _) = match &self.root {
            Some(root) => {
                let path = root.join(&log_file);
                (Box::new(FileSink::create(&path, self.sync)?), None, Some(path))
            }
            None => {
                let m = MemorySink::new();
                (Box::new(m.clone()), Some(m), None)
            }
        };
        let (session, _) = Session::create(&id, config, seed, sink)?;
        if let Some(root) = &self.root {
            let entry = IndexEntry {
                session_id: id.clone(),
                client_token: client_token.clone(),
                token: token.clone(),
                log_file,
            };
            let mut line = serde_json::to_vec(&entry).expect("index entry serializes");
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(root.join(INDEX_FILE))?;
            f.write_all(&line)?;
            if self.sync {
                f.sync_data()?;
            }
        }
        let phase = session.engine().phase();
        let handle = Arc::new(SessionHandle::new(session, token.clone(), memory, path));
        self.sessions.write().expect("sessions lock").insert(id.clone(), handle);
        if let Some(ct) = client_token {
            tokens.insert(ct, id.clone());
        }
        Ok(Created { session_id: id, token, phase, existing: false })
    }
}
