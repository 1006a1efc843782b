//! Rebuild a session from its log.
//!
//! The header gives config and seed; each input event is re-applied to a
//! fresh engine and the events it produces must match the logged group
//! exactly (payload and clock).

use crate::engine::{Engine, EventBody, Stamped, Submission};
use crate::log::{parse_log, Located, LogEvent, LogHeader, ParsedLog, ReplayError};

#[derive(Debug, Clone)]
pub struct Replayed {
    pub header: LogHeader,
    pub engine: Engine,
    /// Length of the log prefix made of complete event groups.
    pub valid_len: usize,
    pub next_seq: u64,
}

fn check_group(
    expected: Vec<Stamped>,
    events: &[Located<LogEvent>],
    i: usize,
    last_valid: usize,
) -> Result<usize, ReplayError> {
    let start = events.get(i).map_or(last_valid, |e| e.offset);
    for (k, (t_ms, body)) in expected.into_iter().enumerate() {
        match events.get(i + k) {
            None => return Err(ReplayError::IncompleteGroup { offset: start, last_valid_offset: last_valid }),
            Some(e) if e.value.t_ms == t_ms && e.value.event == body => {}
            Some(e) => {
                return Err(ReplayError::Divergence {
                    seq: e.value.seq,
                    offset: e.offset,
                    last_valid_offset: last_valid,
                })
            }
        }
    }
    Ok(i)
}

/// Replay as far as the log stays consistent. Returns the state after the
/// last complete group and the first problem found, if any.
fn rebuild(log: &ParsedLog) -> Result<(Replayed, Option<ReplayError>), ReplayError> {
    let (mut engine, opening) =
        Engine::new(log.header.config.clone(), log.header.seed).map_err(|e| ReplayError::BadHeader(e.to_string()))?;
    let events = &log.events;
    let mut valid = log.header_end;
    let mut i = 0;
    let n = opening.len();
    check_group(opening, events, i, valid)?;
    i += n;
    if n > 0 {
        valid = events[i - 1].end;
    }
    let done = |engine: Engine, valid: usize, i: usize| Replayed {
        header: log.header.clone(),
        engine,
        valid_len: valid,
        next_seq: i as u64,
    };
    while i < events.len() {
        let e = &events[i];
        let EventBody::Input { token, presentation_id, input } = &e.value.event else {
            let err = ReplayError::Divergence { seq: e.value.seq, offset: e.offset, last_valid_offset: valid };
            return Ok((done(engine, valid, i), Some(err)));
        };
        let sub = Submission { token: token.clone(), presentation_id: *presentation_id, input: input.clone() };
        let mut next = engine.clone();
        let group = match next.apply(&sub) {
            Ok(g) => g,
            Err(err) => {
                let err = ReplayError::RejectedInput {
                    seq: e.value.seq,
                    offset: e.offset,
                    last_valid_offset: valid,
                    message: err.to_string(),
                };
                return Ok((done(engine, valid, i), Some(err)));
            }
        };
        let n = group.len();
        if let Err(err) = check_group(group, events, i, valid) {
            return Ok((done(engine, valid, i), Some(err)));
        }
        engine = next;
        i += n;
        valid = events[i - 1].end;
    }
    Ok((done(engine, valid, i), None))
}

/// Strict replay: any structural problem or divergence is an error.
pub fn replay_log(bytes: &[u8]) -> Result<Replayed, ReplayError> {
    let (parsed, err) = parse_log(bytes);
    if let Some(err) = err {
        return Err(err);
    }
    let parsed = parsed.ok_or(ReplayError::Empty)?;
    match rebuild(&parsed)? {
        (r, None) => Ok(r),
        (_, Some(err)) => Err(err),
    }
}

/// Crash recovery: a torn final write (partial line or partial group) is
/// dropped; anything else is an error. The caller truncates the log to
/// `valid_len` before appending again.
pub fn recover_log(bytes: &[u8]) -> Result<Replayed, ReplayError> {
    let (parsed, err) = parse_log(bytes);
    match err {
        None | Some(ReplayError::Truncated { .. }) => {}
        Some(other) => return Err(other),
    }
    let parsed = parsed.ok_or(ReplayError::Empty)?;
    match rebuild(&parsed)? {
        (r, None) => Ok(r),
        (r, Some(ReplayError::IncompleteGroup { .. })) => Ok(r),
        (_, Some(err)) => Err(err),
    }
}
