//! Simulated participant driving a session end to end.

use std::collections::BTreeMap;

use thiserror::Error;

use hapsy_core::observer::{ObserverInput, ObserverParams};
use hapsy_core::ordering::{OrderingResponder, SumIntensityResponder};
use hapsy_core::rng::{derive_seed, STREAM_OBSERVER};
use hapsy_core::stimulus::AsrResponder;
use hapsy_core::{ChannelId, ComparisonResponder, ExperimentConfig, Observer, StimulusLevel, StimulusSpec};

use crate::engine::{EventBody, Input, Phase, Presentation, SessionExports, SessionSummary, Stimulus, Submission};
use crate::log::{LogSink, MemorySink};
use crate::session::{Session, SessionError};

/// Upper bound on inputs in one simulated session.
pub const MAX_SIM_INPUTS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("observer: {0}")]
    Observer(String),
    #[error("simulated participant did not finish within {0} inputs")]
    Stalled(u64),
}

/// Responds to presentations with a seeded observer. In force-input mode
/// the observer feels the logged hold force, converted to an equivalent
/// indentation with the nominal tissue stiffness.
pub struct SimParticipant {
    observer: Observer,
    input: ObserverInput,
    stiffness_n_per_mm: f64,
}

impl SimParticipant {
    pub fn new(params: ObserverParams, seed: u64, stiffness_n_per_mm: f64) -> Result<Self, SimError> {
        let input = params.input;
        let observer = Observer::new(params, seed).map_err(|e| SimError::Observer(e.to_string()))?;
        Ok(Self { observer, input, stiffness_n_per_mm })
    }

    pub fn for_config(config: &ExperimentConfig, seed: u64) -> Result<Self, SimError> {
        let params = config.observer_params().map_err(|e| SimError::Observer(e.to_string()))?;
        Self::new(params, derive_seed(seed, STREAM_OBSERVER), config.device.tissue.linear_stiffness_n_per_mm)
    }

    /// The stimulus as this participant perceives it.
    fn felt(&self, spec: &StimulusSpec, hold_force_n: Option<&BTreeMap<ChannelId, f64>>) -> StimulusSpec {
        match (self.input, hold_force_n) {
            (ObserverInput::Force, Some(forces)) => {
                let levels = forces
                    .iter()
                    .map(|(&c, &f)| {
                        let mm = (f / self.stiffness_n_per_mm).max(0.0);
                        (c, StimulusLevel::new(mm).expect("finite non-negative"))
                    })
                    .collect();
                StimulusSpec::new(levels, spec.timing()).expect("same channels and timing")
            }
            _ => spec.clone(),
        }
    }

    /// Input for the pending presentation. `forces` are the hold forces
    /// logged when it was played.
    pub fn respond(&mut self, p: &Presentation, forces: &[BTreeMap<ChannelId, f64>]) -> Input {
        match &p.stimulus {
            Stimulus::Asr { spec, .. } => {
                let felt = self.felt(spec, forces.first());
                Input::Asr { signal: self.observer.respond_asr(&felt) }
            }
            Stimulus::Pair { first, second, .. } => {
                let a = self.felt(first, forces.first());
                let b = self.felt(second, forces.get(1));
                Input::Compare { response: self.observer.compare(&a, &b) }
            }
            Stimulus::Ordering { .. } => unreachable!("ordering is answered by the ordering responder"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedSession {
    pub session_id: String,
    pub summary: SessionSummary,
    pub exports: SessionExports,
    pub submissions: Vec<Submission>,
    pub log: Vec<u8>,
}

/// Run one session with the configured observer. The log is kept in memory.
pub fn simulate_session(config: &ExperimentConfig, seed: u64) -> Result<SimulatedSession, SimError> {
    let sink = MemorySink::new();
    let mut out = simulate_session_into(config, seed, Box::new(sink.clone()))?;
    out.log = sink.contents();
    Ok(out)
}

/// Run one session writing its log to `sink`. `log` in the result is empty.
pub fn simulate_session_into(
    config: &ExperimentConfig,
    seed: u64,
    sink: Box<dyn LogSink>,
) -> Result<SimulatedSession, SimError> {
    let id = format!("sim-{seed:016x}");
    let (mut session, opening) = Session::create(&id, config.clone(), seed, sink)?;
    let mut participant = SimParticipant::for_config(config, seed)?;
    let mut forces = last_forces(&opening, Vec::new());
    let mut submissions = Vec::new();
    for n in 0..MAX_SIM_INPUTS {
        let engine = session.engine();
        if engine.phase().is_terminal() {
            return Ok(SimulatedSession {
                session_id: id,
                summary: engine.summary(),
                exports: engine.exports(),
                submissions,
                log: Vec::new(),
            });
        }
        let input = if engine.phase() == Phase::Ordering {
            let task = engine.ordering_task().expect("ordering task");
            let asr = *engine.asr().expect("ASR done before ordering");
            Input::Ordering { action: SumIntensityResponder { asr }.next_action(task) }
        } else {
            let pending = engine.pending().expect("pending presentation outside ordering");
            participant.respond(pending, &forces)
        };
        let sub = Submission { token: format!("sim-{n}"), presentation_id: engine.pending().map(|p| p.id), input };
        let done = session.submit(&sub)?;
        forces = last_forces(&done.events, forces);
        submissions.push(sub);
    }
    Err(SimError::Stalled(MAX_SIM_INPUTS))
}

fn last_forces(
    events: &[crate::log::LogEvent],
    previous: Vec<BTreeMap<ChannelId, f64>>,
) -> Vec<BTreeMap<ChannelId, f64>> {
    events
        .iter()
        .rev()
        .find_map(|e| match &e.event {
            EventBody::Presented { replay: false, hold_force_n, .. } => Some(hold_force_n.clone()),
            _ => None,
        })
        .unwrap_or(previous)
}
