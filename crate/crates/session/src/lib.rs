//! Session service: runs ASR, the one- and two-site staircases and the
//! ordering task as one state machine, persists a replayable log and serves
//! the experiment over HTTP with a server-sent event stream.

pub mod api;
pub mod engine;
pub mod log;
pub mod replay;
pub mod session;
pub mod sim;
pub mod store;

pub use engine::{
    Engine, EventBody, Input, Phase, Presentation, ProtocolError, SessionExports, SessionSummary, Stimulus, Submission,
};
pub use log::{LogEvent, LogHeader, ReplayError};
pub use replay::{recover_log, replay_log, Replayed};
pub use session::{Session, SessionError, Submitted};
pub use sim::{simulate_session, SimError, SimParticipant, SimulatedSession};
pub use store::{SessionSnapshot, SessionStore};
