//! Deterministic session state machine.
//!
//! An [`Engine`] is a pure function of (config, seed, accepted inputs).
//! Every accepted input yields a group of events: the input itself followed
//! by the events it caused. Replaying the inputs against a fresh engine
//! reproduces the groups exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use hapsy_core::device::{PressureDevice, SimDevice};
use hapsy_core::export::{placements_csv, strip_svg, trace_csv, trace_rows, trace_svg, TraceRow};
use hapsy_core::ordering::{
    build_pair_set, ordering_metrics, ContinuumPlacement, LabeledPair, OrderingAction, OrderingError, OrderingMetrics,
    OrderingRun, OrderingTask, PairLabel,
};
use hapsy_core::rng::{derive_seed, STREAM_DEVICE_NOISE};
use hapsy_core::staircase::{Direction, StaircaseError, StepOutcome, TrialOutcome, TrialRecord};
use hapsy_core::stimulus::{AsrRegistry, AsrRun, AsrSeries, AsrSignal, AsrStep, PairOrder};
use hapsy_core::{
    AsrResult, ChannelId, ChannelSet, ConfigError, ExperimentConfig, JndEstimate, Response, Staircase, StaircaseConfig,
    StimulusSpec,
};

const SCHEDULE_STREAMS: [&str; 2] = ["schedule-1site", "schedule-2site"];
const STAIRCASE_PHASES: [Phase; 2] = [Phase::Staircase1Site, Phase::Staircase2Site];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "STAIRCASE_1SITE")]
    Staircase1Site,
    #[serde(rename = "STAIRCASE_2SITE")]
    Staircase2Site,
    #[serde(rename = "ORDERING")]
    Ordering,
    #[serde(rename = "DONE")]
    Done,
    #[serde(rename = "ABORTED")]
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Aborted)
    }

    /// Successor on the normal path.
    pub fn next(self) -> Option<Phase> {
        match self {
            Phase::Asr => Some(Phase::Staircase1Site),
            Phase::Staircase1Site => Some(Phase::Staircase2Site),
            Phase::Staircase2Site => Some(Phase::Ordering),
            Phase::Ordering => Some(Phase::Done),
            Phase::Done | Phase::Aborted => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Asr => "ASR",
            Phase::Staircase1Site => "STAIRCASE_1SITE",
            Phase::Staircase2Site => "STAIRCASE_2SITE",
            Phase::Ordering => "ORDERING",
            Phase::Done => "DONE",
            Phase::Aborted => "ABORTED",
        }
    }

    fn staircase_index(self) -> Option<usize> {
        STAIRCASE_PHASES.iter().position(|&p| p == self)
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the device plays for a presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stimulus {
    Asr { level_mm: f64, spec: StimulusSpec },
    Pair { trial_index: u64, comparison_mm: f64, order: PairOrder, first: StimulusSpec, second: StimulusSpec },
    Ordering { label: PairLabel, spec: StimulusSpec },
}

impl Stimulus {
    pub fn specs(&self) -> Vec<&StimulusSpec> {
        match self {
            Stimulus::Asr { spec, .. } | Stimulus::Ordering { spec, .. } => vec![spec],
            Stimulus::Pair { first, second, .. } => vec![first, second],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub id: u64,
    pub phase: Phase,
    pub stimulus: Stimulus,
}

/// A participant or operator action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Input {
    Asr { signal: AsrSignal },
    Compare { response: Response },
    Ordering { action: OrderingAction },
    Abort { reason: String },
}

impl Input {
    pub fn kind(&self) -> &'static str {
        match self {
            Input::Asr { .. } => "asr",
            Input::Compare { .. } => "compare",
            Input::Ordering { .. } => "ordering",
            Input::Abort { .. } => "abort",
        }
    }
}

/// An input with its idempotency token and optional optimistic lock on the
/// pending presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presentation_id: Option<u64>,
    pub input: Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRow {
    pub t_ms: u64,
    pub force_n: Vec<f64>,
}

/// Staircase position when a reversal was recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversalSnapshot {
    pub level_after_mm: f64,
    pub consecutive_correct: u8,
    pub last_move_direction: Direction,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    Input {
        token: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        presentation_id: Option<u64>,
        input: Input,
    },
    Phase {
        from: Option<Phase>,
        to: Phase,
    },
    /// A stimulus was played. `hold_force_n` holds the mean logged force
    /// over the second half of each hold, per channel.
    Presented {
        presentation: Presentation,
        replay: bool,
        hold_force_n: Vec<BTreeMap<ChannelId, f64>>,
    },
    /// Decimated sensor readings during a presentation.
    Force {
        channels: Vec<ChannelId>,
        rows: Vec<ForceRow>,
    },
    AsrComplete {
        run: AsrRun,
    },
    Trial {
        phase: Phase,
        record: TrialRecord,
        step: StepOutcome,
    },
    Discarded {
        phase: Phase,
        trial_index: u64,
    },
    Reversal {
        phase: Phase,
        count: usize,
        level_mm: f64,
        snapshot: ReversalSnapshot,
    },
    StaircaseComplete {
        phase: Phase,
        estimate: JndEstimate,
    },
    OrderingComplete {
        run: OrderingRun,
        metrics: Option<OrderingMetrics>,
    },
    Aborted {
        reason: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Input { .. } => "input",
            EventBody::Phase { .. } => "phase",
            EventBody::Presented { .. } => "presented",
            EventBody::Force { .. } => "force",
            EventBody::AsrComplete { .. } => "asr_complete",
            EventBody::Trial { .. } => "trial",
            EventBody::Discarded { .. } => "discarded",
            EventBody::Reversal { .. } => "reversal",
            EventBody::StaircaseComplete { .. } => "staircase_complete",
            EventBody::OrderingComplete { .. } => "ordering_complete",
            EventBody::Aborted { .. } => "aborted",
        }
    }
}

/// Event with the device clock at which it was produced.
pub type Stamped = (u64, EventBody);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("session is {0}; no further input accepted")]
    Terminal(Phase),
    #[error("no pending presentation")]
    NoPendingPresentation,
    #[error("presentation {got} is not pending (pending: {expected:?})")]
    StalePresentation { expected: Option<u64>, got: u64 },
    #[error("{input} input not accepted during {phase}")]
    WrongInput { phase: Phase, input: &'static str },
    #[error("response token must not be empty")]
    EmptyToken,
    #[error("ordering: {0}")]
    Ordering(#[from] OrderingError),
    #[error("staircase: {0}")]
    Staircase(#[from] StaircaseError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("device: {0}")]
    Device(String),
}

/// Staircase settings from the experiment config for one channel set.
pub fn staircase_config(config: &ExperimentConfig, asr: &AsrResult, channel_set: ChannelSet) -> StaircaseConfig {
    let s = &config.staircase;
    let mut c = StaircaseConfig::for_asr(asr, channel_set);
    c.start_comparison_mm = asr.reference_mm + s.start_fraction * (asr.max_comfortable_mm - asr.reference_mm);
    c.step_up_mm = s.step_up_mm;
    c.step_ratio_down_over_up = s.step_ratio_down_over_up;
    c.n_reversals_to_stop = s.n_reversals_to_stop;
    c.n_reversals_for_estimate = s.n_reversals_for_estimate;
    c.equal_counts_as = s.equal_counts_as;
    c.timing = config.timing;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseProgress {
    pub phase: Phase,
    pub reference_mm: f64,
    pub current_level_mm: f64,
    pub trials: usize,
    pub reversals: usize,
    pub trace: Vec<TraceRow>,
}

/// Read-only view for monitors and the response pad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineView {
    pub phase: Phase,
    pub clock_ms: u64,
    pub pending: Option<Presentation>,
    pub presentations: u64,
    pub inputs: u64,
    pub asr: Option<AsrResult>,
    pub staircase: Option<StaircaseProgress>,
    pub placements: Vec<ContinuumPlacement>,
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub phase: Phase,
    pub asr: Option<AsrResult>,
    pub one_site: Option<JndEstimate>,
    pub two_site: Option<JndEstimate>,
    pub ordering: Option<OrderingRun>,
    pub ordering_metrics: Option<OrderingMetrics>,
    pub abort_reason: Option<String>,
}

/// Derived files. Regenerated identically by replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionExports {
    pub summary_json: String,
    pub one_site_trace_csv: String,
    pub two_site_trace_csv: String,
    pub placements_csv: String,
    pub trace_svg: String,
    pub strip_svg: String,
}

impl SessionExports {
    pub const FILE_NAMES: [&'static str; 6] =
        ["summary.json", "one_site_trace.csv", "two_site_trace.csv", "placements.csv", "trace.svg", "strip.svg"];

    pub fn files(&self) -> [(&'static str, &str); 6] {
        let n = Self::FILE_NAMES;
        [
            (n[0], &self.summary_json),
            (n[1], &self.one_site_trace_csv),
            (n[2], &self.two_site_trace_csv),
            (n[3], &self.placements_csv),
            (n[4], &self.trace_svg),
            (n[5], &self.strip_svg),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: ExperimentConfig,
    seed: u64,
    one_site: ChannelSet,
    two_site: ChannelSet,
    phase: Phase,
    presentations: u64,
    inputs: u64,
    pending: Option<Presentation>,
    asr_series: AsrSeries,
    asr_run: Option<AsrRun>,
    registry: AsrRegistry,
    staircases: [Option<Staircase>; 2],
    estimates: [Option<JndEstimate>; 2],
    pairs: Vec<LabeledPair>,
    ordering: Option<OrderingTask>,
    ordering_metrics: Option<OrderingMetrics>,
    abort_reason: Option<String>,
    tokens: BTreeSet<String>,
    device: SimDevice,
}

impl Engine {
    /// A fresh session in the ASR phase, with its opening events.
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<(Self, Vec<Stamped>), EngineError> {
        config.validate()?;
        let one_site = config.one_site()?;
        let two_site = config.two_site()?;
        let device = SimDevice::new(config.device.clone(), derive_seed(seed, STREAM_DEVICE_NOISE))
            .map_err(|e| EngineError::Device(e.to_string()))?;
        let asr_series = AsrSeries::new(one_site.clone(), config.asr_procedure())
            .map_err(|e| ConfigError::field("asr", e.to_string()))?;
        let mut engine = Self {
            config,
            seed,
            one_site,
            two_site,
            phase: Phase::Asr,
            presentations: 0,
            inputs: 0,
            pending: None,
            asr_series,
            asr_run: None,
            registry: AsrRegistry::default(),
            staircases: [None, None],
            estimates: [None, None],
            pairs: Vec::new(),
            ordering: None,
            ordering_metrics: None,
            abort_reason: None,
            tokens: BTreeSet::new(),
            device,
        };
        let mut out = Vec::new();
        engine.emit(&mut out, EventBody::Phase { from: None, to: Phase::Asr });
        engine.present_asr(&mut out);
        Ok((engine, out))
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn pending(&self) -> Option<&Presentation> {
        self.pending.as_ref()
    }

    pub fn clock_ms(&self) -> u64 {
        self.device.now_ms()
    }

    pub fn asr(&self) -> Option<&AsrResult> {
        self.asr_run.as_ref().map(|r| &r.result)
    }

    pub fn staircase(&self, phase: Phase) -> Option<&Staircase> {
        self.staircases[phase.staircase_index()?].as_ref()
    }

    pub fn ordering_task(&self) -> Option<&OrderingTask> {
        self.ordering.as_ref()
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    pub fn has_token(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn inputs(&self) -> u64 {
        self.inputs
    }

    fn emit(&self, out: &mut Vec<Stamped>, body: EventBody) {
        out.push((self.device.now_ms(), body));
    }

    /// Apply one submission, returning its event group (input first).
    /// On error the engine may be partially modified; callers apply
    /// submissions to a clone and keep it only on success.
    pub fn apply(&mut self, sub: &Submission) -> Result<Vec<Stamped>, ProtocolError> {
        if self.phase.is_terminal() {
            return Err(ProtocolError::Terminal(self.phase));
        }
        if sub.token.is_empty() {
            return Err(ProtocolError::EmptyToken);
        }
        if let Some(got) = sub.presentation_id {
            let expected = self.pending.as_ref().map(|p| p.id);
            if expected != Some(got) {
                return Err(ProtocolError::StalePresentation { expected, got });
            }
        }
        let mut out = Vec::new();
        self.emit(
            &mut out,
            EventBody::Input {
                token: sub.token.clone(),
                presentation_id: sub.presentation_id,
                input: sub.input.clone(),
            },
        );
        match (&sub.input, self.phase) {
            (Input::Abort { reason }, _) => self.abort(reason.clone(), &mut out),
            (Input::Asr { signal }, Phase::Asr) => {
                self.take_pending()?;
                self.on_asr(*signal, &mut out);
            }
            (Input::Compare { response }, Phase::Staircase1Site | Phase::Staircase2Site) => {
                self.take_pending()?;
                self.on_compare(*response, &mut out)?;
            }
            (Input::Ordering { action }, Phase::Ordering) => self.on_ordering(*action, &mut out)?,
            (input, phase) => return Err(ProtocolError::WrongInput { phase, input: input.kind() }),
        }
        self.inputs += 1;
        self.tokens.insert(sub.token.clone());
        Ok(out)
    }

    fn take_pending(&mut self) -> Result<Presentation, ProtocolError> {
        self.pending.take().ok_or(ProtocolError::NoPendingPresentation)
    }

    fn transition(&mut self, to: Phase, out: &mut Vec<Stamped>) {
        self.emit(out, EventBody::Phase { from: Some(self.phase), to });
        self.phase = to;
    }

    fn abort(&mut self, reason: String, out: &mut Vec<Stamped>) {
        self.pending = None;
        self.abort_reason = Some(reason.clone());
        self.emit(out, EventBody::Aborted { reason });
        self.transition(Phase::Aborted, out);
    }

    /// Play `stimulus` on the device and log it. Non-replay presentations
    /// become the pending one.
    fn present(&mut self, stimulus: Stimulus, replay: bool, out: &mut Vec<Stamped>) {
        let presentation = Presentation { id: self.presentations, phase: self.phase, stimulus };
        self.presentations += 1;
        let t0 = self.device.now_ms();
        let (hold_force_n, force) = self.play(&presentation.stimulus.specs());
        out.push((t0, EventBody::Presented { presentation: presentation.clone(), replay, hold_force_n }));
        out.push((t0, force));
        if !replay {
            self.pending = Some(presentation);
        }
    }

    /// Drive the device through hold and gap of each spec, sampling force at
    /// the configured logging rate.
    fn play(&mut self, specs: &[&StimulusSpec]) -> (Vec<BTreeMap<ChannelId, f64>>, EventBody) {
        let channels: Vec<ChannelId> =
            specs.iter().flat_map(|s| s.levels.keys().copied()).collect::<BTreeSet<_>>().into_iter().collect();
        let tick_hz = self.device.params().actuator.tick_rate_hz;
        let period = u64::from((tick_hz / self.config.logging.force_log_hz).max(1));
        let device_channels = self.device.channel_count() as u8;
        let mut rows = Vec::new();
        let mut hold_means = Vec::with_capacity(specs.len());
        let mut tick = 0u64;
        for spec in specs {
            for raw in 0..device_channels {
                let ch = ChannelId::new(raw).expect("validated channel count");
                let mm = spec.levels.get(&ch).map_or(0.0, |l| l.mm());
                self.device.set_target(ch, mm).expect("levels are finite and non-negative");
            }
            let hold = self.device.ticks_for_ms(spec.hold_duration_ms);
            let mut sums = vec![(0.0, 0u32); channels.len()];
            for i in 0..hold {
                self.device.tick();
                tick += 1;
                if tick.is_multiple_of(period) {
                    let row = self.sample(&channels);
                    if i >= hold / 2 {
                        for (s, f) in sums.iter_mut().zip(&row.force_n) {
                            s.0 += f;
                            s.1 += 1;
                        }
                    }
                    rows.push(row);
                }
            }
            let means = channels
                .iter()
                .zip(&sums)
                .filter(|(ch, _)| spec.levels.contains_key(ch))
                .map(|(&ch, &(sum, n))| {
                    let mean = if n > 0 {
                        sum / f64::from(n)
                    } else {
                        self.device.read_force(ch).expect("known channel").force_n
                    };
                    (ch, mean)
                })
                .collect();
            hold_means.push(means);
            for raw in 0..device_channels {
                let ch = ChannelId::new(raw).expect("validated channel count");
                self.device.set_target(ch, 0.0).expect("zero is a valid target");
            }
            for _ in 0..self.device.ticks_for_ms(spec.inter_stimulus_gap_ms) {
                self.device.tick();
                tick += 1;
                if tick.is_multiple_of(period) {
                    let row = self.sample(&channels);
                    rows.push(row);
                }
            }
        }
        (hold_means, EventBody::Force { channels, rows })
    }

    fn sample(&mut self, channels: &[ChannelId]) -> ForceRow {
        let t_ms = self.device.now_ms();
        let force_n = channels.iter().map(|&c| self.device.read_force(c).expect("known channel").force_n).collect();
        ForceRow { t_ms, force_n }
    }

    fn present_asr(&mut self, out: &mut Vec<Stamped>) {
        match self.asr_series.next_spec() {
            Ok(spec) => {
                let level_mm = spec.level_values().next().expect("non-empty spec");
                self.present(Stimulus::Asr { level_mm, spec }, false, out);
            }
            Err(e) => self.abort(format!("ASR failed: {e}"), out),
        }
    }

    fn on_asr(&mut self, signal: AsrSignal, out: &mut Vec<Stamped>) {
        match self.asr_series.record(signal) {
            Ok(AsrStep::Continue) => self.present_asr(out),
            Ok(AsrStep::Done(run)) => {
                // One measured range serves both channel sets.
                self.registry.register(self.one_site.clone(), run.result);
                self.registry.register(self.two_site.clone(), run.result);
                self.emit(out, EventBody::AsrComplete { run: run.clone() });
                self.asr_run = Some(run);
                self.start_staircase(0, out);
            }
            Err(e) => self.abort(format!("ASR failed: {e}"), out),
        }
    }

    fn start_staircase(&mut self, idx: usize, out: &mut Vec<Stamped>) {
        let set = if idx == 0 { self.one_site.clone() } else { self.two_site.clone() };
        let asr = *self.registry.lookup(&set).expect("registered after ASR");
        let config = staircase_config(&self.config, &asr, set);
        self.transition(STAIRCASE_PHASES[idx], out);
        match Staircase::new(config, asr, derive_seed(self.seed, SCHEDULE_STREAMS[idx])) {
            Ok(s) => {
                self.staircases[idx] = Some(s);
                self.present_trial(idx, out);
            }
            Err(e) => self.abort(format!("staircase: {e}"), out),
        }
    }

    fn present_trial(&mut self, idx: usize, out: &mut Vec<Stamped>) {
        let cap = self.config.staircase.trial_cap;
        let s = self.staircases[idx].as_mut().expect("active staircase");
        if s.state().presentations >= cap {
            return self.abort(format!("trial cap of {cap} reached"), out);
        }
        let p = s.next_trial().expect("incomplete staircase");
        let stimulus = Stimulus::Pair {
            trial_index: p.trial_index,
            comparison_mm: p.comparison_mm,
            order: p.pair.order,
            first: p.pair.first,
            second: p.pair.second,
        };
        self.present(stimulus, false, out);
    }

    fn on_compare(&mut self, response: Response, out: &mut Vec<Stamped>) -> Result<(), ProtocolError> {
        let idx = self.phase.staircase_index().expect("staircase phase");
        let phase = self.phase;
        let s = self.staircases[idx].as_mut().expect("active staircase");
        match s.submit(response)? {
            TrialOutcome::Discarded { trial_index } => {
                self.emit(out, EventBody::Discarded { phase, trial_index });
                self.present_trial(idx, out);
            }
            TrialOutcome::Scored { record, step } => {
                let reversal = step.reversal.then(|| {
                    let st = s.state();
                    EventBody::Reversal {
                        phase,
                        count: st.reversal_levels_mm.len(),
                        level_mm: step.level_before_mm,
                        snapshot: ReversalSnapshot {
                            level_after_mm: st.current_comparison_mm,
                            consecutive_correct: st.consecutive_correct,
                            last_move_direction: st.last_move_direction,
                            trials: st.trial_log.len(),
                        },
                    }
                });
                let estimate = if step.complete { Some(s.estimate_jnd()?) } else { None };
                self.emit(out, EventBody::Trial { phase, record, step });
                if let Some(r) = reversal {
                    self.emit(out, r);
                }
                match estimate {
                    Some(estimate) => {
                        self.estimates[idx] = Some(estimate.clone());
                        self.emit(out, EventBody::StaircaseComplete { phase, estimate });
                        if idx == 0 {
                            self.start_staircase(1, out);
                        } else {
                            self.start_ordering(out);
                        }
                    }
                    None => self.present_trial(idx, out),
                }
            }
        }
        Ok(())
    }

    fn start_ordering(&mut self, out: &mut Vec<Stamped>) {
        self.transition(Phase::Ordering, out);
        let set = self.two_site.as_slice();
        let built = build_pair_set(self.registry.lookup(&self.two_site), [set[0], set[1]], self.config.timing)
            .and_then(|pairs| OrderingTask::new(pairs, self.seed));
        match built {
            Ok(task) => {
                let first = task.pending().expect("first pair is presented").clone();
                self.pairs = task.pairs().to_vec();
                self.ordering = Some(task);
                self.present(Stimulus::Ordering { label: first.label, spec: first.spec }, false, out);
            }
            Err(e) => self.abort(format!("ordering: {e}"), out),
        }
    }

    fn on_ordering(&mut self, action: OrderingAction, out: &mut Vec<Stamped>) -> Result<(), ProtocolError> {
        let task = self.ordering.as_mut().expect("ordering phase has a task");
        let before = task.pending().map(|p| p.label);
        let spec = task.apply(action)?;
        let after = task.pending().map(|p| p.label);
        match action {
            OrderingAction::Replay { label } => {
                let spec = spec.expect("replay returns the spec");
                self.present(Stimulus::Ordering { label, spec }, true, out);
            }
            OrderingAction::Place { .. } => {
                if before != after {
                    self.pending = None;
                }
                if let (Some(label), Some(spec)) = (after, spec) {
                    self.present(Stimulus::Ordering { label, spec }, false, out);
                }
            }
            OrderingAction::Finalize => {
                let run = task.run();
                let metrics = ordering_metrics(&run.placements, task.pairs()).ok();
                self.ordering_metrics = metrics;
                self.pending = None;
                self.emit(out, EventBody::OrderingComplete { run, metrics });
                self.transition(Phase::Done, out);
            }
            OrderingAction::Abort => self.abort("ordering aborted by participant".into(), out),
        }
        Ok(())
    }

    pub fn view(&self) -> EngineView {
        let staircase = self.phase.staircase_index().and_then(|i| self.staircases[i].as_ref()).map(|s| {
            let st = s.state();
            StaircaseProgress {
                phase: self.phase,
                reference_mm: s.config().reference_mm,
                current_level_mm: st.current_comparison_mm,
                trials: st.trial_log.len(),
                reversals: st.reversal_levels_mm.len(),
                trace: trace_rows(&st.trial_log),
            }
        });
        EngineView {
            phase: self.phase,
            clock_ms: self.clock_ms(),
            pending: self.pending.clone(),
            presentations: self.presentations,
            inputs: self.inputs,
            asr: self.asr().copied(),
            staircase,
            placements: self.ordering.as_ref().map(|t| t.placements()).unwrap_or_default(),
            abort_reason: self.abort_reason.clone(),
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            phase: self.phase,
            asr: self.asr().copied(),
            one_site: self.estimates[0].clone(),
            two_site: self.estimates[1].clone(),
            ordering: self.ordering.as_ref().map(|t| t.run()),
            ordering_metrics: self.ordering_metrics,
            abort_reason: self.abort_reason.clone(),
        }
    }

    fn trial_log(&self, idx: usize) -> &[TrialRecord] {
        self.staircases[idx].as_ref().map_or(&[], |s| &s.state().trial_log)
    }

    pub fn exports(&self) -> SessionExports {
        let reference = self.asr().map_or(0.0, |a| a.reference_mm);
        let run = self.ordering.as_ref().map(|t| t.run());
        SessionExports {
            summary_json: serde_json::to_string_pretty(&self.summary()).expect("summary serializes") + "\n",
            one_site_trace_csv: trace_csv(self.trial_log(0)),
            two_site_trace_csv: trace_csv(self.trial_log(1)),
            placements_csv: run
                .as_ref()
                .map_or_else(|| placements_csv(&empty_run(), &[]), |r| placements_csv(r, &self.pairs)),
            trace_svg: trace_svg(&[("one-site", self.trial_log(0)), ("two-site", self.trial_log(1))], reference),
            strip_svg: strip_svg(run.as_ref().unwrap_or(&empty_run())),
        }
    }

    /// Canonical serialization of the full logical state, for equality
    /// checks between live and recovered engines.
    pub fn checkpoint(&self) -> String {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            seed: u64,
            phase: Phase,
            presentations: u64,
            inputs: u64,
            pending: &'a Option<Presentation>,
            asr_series: &'a AsrSeries,
            asr_run: &'a Option<AsrRun>,
            staircases: &'a [Option<Staircase>; 2],
            estimates: &'a [Option<JndEstimate>; 2],
            ordering: &'a Option<OrderingTask>,
            abort_reason: &'a Option<String>,
            tokens: &'a BTreeSet<String>,
            device_ticks: u64,
            device_positions: Vec<(f64, f64, f64)>,
        }
        let device_positions = (0..self.device.channel_count() as u8)
            .map(|c| {
                let s = self.device.channel(ChannelId::new(c).expect("valid")).expect("known channel");
                (s.target_mm, s.position_mm, s.velocity_mm_s)
            })
            .collect();
        serde_json::to_string(&Checkpoint {
            seed: self.seed,
            phase: self.phase,
            presentations: self.presentations,
            inputs: self.inputs,
            pending: &self.pending,
            asr_series: &self.asr_series,
            asr_run: &self.asr_run,
            staircases: &self.staircases,
            estimates: &self.estimates,
            ordering: &self.ordering,
            abort_reason: &self.abort_reason,
            tokens: &self.tokens,
            device_ticks: self.device.ticks(),
            device_positions,
        })
        .expect("checkpoint serializes")
    }
}

fn empty_run() -> OrderingRun {
    OrderingRun {
        presentation_order: Vec::new(),
        placements: Vec::new(),
        replays: Vec::new(),
        status: hapsy_core::ordering::OrderingStatus::InProgress,
    }
}
