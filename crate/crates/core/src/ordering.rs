//! Pair-ordering task: nine two-channel stimuli built from the ASR anchors,
//! placed by the participant on a [0, 1] continuum.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, STREAM_ORDERING};
use crate::stimulus::{AsrResult, ChannelId, StimulusLevel, StimulusSpec, StimulusTiming};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrderingError {
    #[error("no ASR registered for the ordering channels")]
    MissingAsr,
    #[error("ordering needs two distinct channels")]
    SameChannel,
    #[error("expected 9 labelled pairs, got {0}")]
    WrongPairCount(usize),
    #[error("position {0} is outside [0, 1]")]
    InvalidPosition(f64),
    #[error("pair {0} has not been presented yet")]
    NotPresented(PairLabel),
    #[error("cannot finalize: {0} pairs unplaced")]
    Unplaced(usize),
    #[error("ordering task is {0:?}")]
    NotActive(OrderingStatus),
    #[error("responder issued {0} actions without finishing")]
    ResponderStalled(usize),
    #[error("placement for {0} missing or duplicated")]
    BadPlacements(PairLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Anchor {
    Min,
    Med,
    Max,
}

impl Anchor {
    pub fn level_mm(self, asr: &AsrResult) -> f64 {
        match self {
            Anchor::Min => asr.detection_threshold_mm,
            Anchor::Med => asr.reference_mm,
            Anchor::Max => asr.max_comfortable_mm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl PairLabel {
    pub const ALL: [PairLabel; 9] = [
        PairLabel::A,
        PairLabel::B,
        PairLabel::C,
        PairLabel::D,
        PairLabel::E,
        PairLabel::F,
        PairLabel::G,
        PairLabel::H,
        PairLabel::I,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let i = (c as u32).checked_sub('A' as u32)? as usize;
        Self::ALL.get(i).copied()
    }

    /// (first channel, second channel): row-major over MIN, MED, MAX.
    pub fn anchors(self) -> (Anchor, Anchor) {
        const A: [Anchor; 3] = [Anchor::Min, Anchor::Med, Anchor::Max];
        let i = self.index();
        (A[i / 3], A[i % 3])
    }
}

impl fmt::Display for PairLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub label: PairLabel,
    pub first_mm: f64,
    pub second_mm: f64,
    pub spec: StimulusSpec,
}

impl LabeledPair {
    pub fn total_mm(&self) -> f64 {
        self.first_mm + self.second_mm
    }
}

/// The nine labelled specs in label order.
pub fn build_pair_set(
    asr: Option<&AsrResult>,
    channels: [ChannelId; 2],
    timing: StimulusTiming,
) -> Result<Vec<LabeledPair>, OrderingError> {
    let asr = asr.ok_or(OrderingError::MissingAsr)?;
    if channels[0] == channels[1] {
        return Err(OrderingError::SameChannel);
    }
    Ok(PairLabel::ALL
        .iter()
        .map(|&label| {
            let (a, b) = label.anchors();
            let (first_mm, second_mm) = (a.level_mm(asr), b.level_mm(asr));
            let levels = BTreeMap::from([
                (channels[0], StimulusLevel::new(first_mm).expect("ASR bounds are valid levels")),
                (channels[1], StimulusLevel::new(second_mm).expect("ASR bounds are valid levels")),
            ]);
            let spec = StimulusSpec::new(levels, timing).expect("two channels, validated timing");
            LabeledPair { label, first_mm, second_mm, spec }
        })
        .collect())
}

/// Ground-truth weak order: labels grouped by exact channel-sum, ascending.
pub fn tie_classes(pairs: &[LabeledPair]) -> Vec<Vec<PairLabel>> {
    let mut sorted: Vec<&LabeledPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.total_mm().total_cmp(&b.total_mm()).then(a.label.cmp(&b.label)));
    let mut classes: Vec<(f64, Vec<PairLabel>)> = Vec::new();
    for p in sorted {
        match classes.last_mut() {
            Some((sum, members)) if *sum == p.total_mm() => members.push(p.label),
            _ => classes.push((p.total_mm(), vec![p.label])),
        }
    }
    classes.into_iter().map(|(_, m)| m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuumPlacement {
    pub label: PairLabel,
    pub position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderingStatus {
    InProgress,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum OrderingAction {
    Replay { label: PairLabel },
    Place { label: PairLabel, position: f64 },
    Finalize,
    Abort,
}

/// Incremental ordering task. Pairs are presented in a seeded random order;
/// the pending pair must be placed before the next is presented. Presented
/// pairs may be replayed or moved until the task is finalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingTask {
    pairs: Vec<LabeledPair>,
    presentation_order: Vec<PairLabel>,
    presented: usize,
    positions: BTreeMap<PairLabel, f64>,
    replays: BTreeMap<PairLabel, u32>,
    status: OrderingStatus,
}

/// Seeded presentation order of the nine labels.
pub fn presentation_order(seed: u64) -> Vec<PairLabel> {
    let mut order = PairLabel::ALL.to_vec();
    order.shuffle(&mut substream(seed, STREAM_ORDERING));
    order
}

impl OrderingTask {
    pub fn new(pairs: Vec<LabeledPair>, seed: u64) -> Result<Self, OrderingError> {
        if pairs.len() != 9 || pairs.iter().zip(PairLabel::ALL).any(|(p, l)| p.label != l) {
            return Err(OrderingError::WrongPairCount(pairs.len()));
        }
        Ok(Self {
            pairs,
            presentation_order: presentation_order(seed),
            presented: 1,
            positions: BTreeMap::new(),
            replays: BTreeMap::new(),
            status: OrderingStatus::InProgress,
        })
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    pub fn pair(&self, label: PairLabel) -> &LabeledPair {
        &self.pairs[label.index()]
    }

    pub fn presentation_order(&self) -> &[PairLabel] {
        &self.presentation_order
    }

    pub fn status(&self) -> OrderingStatus {
        self.status
    }

    /// The presented pair awaiting its first placement.
    pub fn pending(&self) -> Option<&LabeledPair> {
        if self.status != OrderingStatus::InProgress {
            return None;
        }
        let label = *self.presentation_order.get(self.presented - 1)?;
        (!self.positions.contains_key(&label)).then(|| self.pair(label))
    }

    pub fn is_presented(&self, label: PairLabel) -> bool {
        self.presentation_order[..self.presented].contains(&label)
    }

    pub fn placed_count(&self) -> usize {
        self.positions.len()
    }

    pub fn replay_count(&self, label: PairLabel) -> u32 {
        self.replays.get(&label).copied().unwrap_or(0)
    }

    fn active(&self) -> Result<(), OrderingError> {
        match self.status {
            OrderingStatus::InProgress => Ok(()),
            s => Err(OrderingError::NotActive(s)),
        }
    }

    /// Apply one participant action. Returns the spec to present, if any.
    pub fn apply(&mut self, action: OrderingAction) -> Result<Option<StimulusSpec>, OrderingError> {
        self.active()?;
        match action {
            OrderingAction::Replay { label } => {
                if !self.is_presented(label) {
                    return Err(OrderingError::NotPresented(label));
                }
                *self.replays.entry(label).or_default() += 1;
                Ok(Some(self.pair(label).spec.clone()))
            }
            OrderingAction::Place { label, position } => {
                if !(position.is_finite() && (0.0..=1.0).contains(&position)) {
                    return Err(OrderingError::InvalidPosition(position));
                }
                if !self.is_presented(label) {
                    return Err(OrderingError::NotPresented(label));
                }
                self.positions.insert(label, position);
                if self.pending().is_none() && self.presented < self.presentation_order.len() {
                    self.presented += 1;
                    return Ok(Some(self.pair(self.presentation_order[self.presented - 1]).spec.clone()));
                }
                Ok(None)
            }
            OrderingAction::Finalize => {
                let missing = 9 - self.positions.len();
                if missing > 0 {
                    return Err(OrderingError::Unplaced(missing));
                }
                self.status = OrderingStatus::Complete;
                Ok(None)
            }
            OrderingAction::Abort => {
                self.status = OrderingStatus::Aborted;
                Ok(None)
            }
        }
    }

    /// Placements in label order.
    pub fn placements(&self) -> Vec<ContinuumPlacement> {
        self.positions.iter().map(|(&label, &position)| ContinuumPlacement { label, position }).collect()
    }

    pub fn run(&self) -> OrderingRun {
        OrderingRun {
            presentation_order: self.presentation_order.clone(),
            placements: self.placements(),
            replays: PairLabel::ALL.iter().map(|&l| self.replay_count(l)).collect(),
            status: self.status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRun {
    pub presentation_order: Vec<PairLabel>,
    pub placements: Vec<ContinuumPlacement>,
    /// Replay count per label, in label order.
    pub replays: Vec<u32>,
    pub status: OrderingStatus,
}

pub trait OrderingResponder {
    fn next_action(&mut self, task: &OrderingTask) -> OrderingAction;
}

pub const MAX_ORDERING_ACTIONS: usize = 10_000;

/// Drive an ordering task to completion or abort. An aborted run is
/// returned with its partial placements and `Aborted` status.
pub fn run_ordering_session(
    pairs: Vec<LabeledPair>,
    responder: &mut dyn OrderingResponder,
    seed: u64,
) -> Result<OrderingRun, OrderingError> {
    let mut task = OrderingTask::new(pairs, seed)?;
    for _ in 0..MAX_ORDERING_ACTIONS {
        let action = responder.next_action(&task);
        task.apply(action)?;
        if task.status() != OrderingStatus::InProgress {
            return Ok(task.run());
        }
    }
    Err(OrderingError::ResponderStalled(MAX_ORDERING_ACTIONS))
}

/// Places each pair by its total commanded level, scaled so that
/// (MIN, MIN) sits at 0 and (MAX, MAX) at 1.
#[derive(Debug, Clone, Copy)]
pub struct SumIntensityResponder {
    pub asr: AsrResult,
}

impl SumIntensityResponder {
    pub fn position(&self, pair: &LabeledPair) -> f64 {
        let lo = 2.0 * self.asr.detection_threshold_mm;
        let hi = 2.0 * self.asr.max_comfortable_mm;
        ((pair.total_mm() - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

impl OrderingResponder for SumIntensityResponder {
    fn next_action(&mut self, task: &OrderingTask) -> OrderingAction {
        match task.pending() {
            Some(pair) => OrderingAction::Place { label: pair.label, position: self.position(pair) },
            None => OrderingAction::Finalize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingMetrics {
    pub kendall_tau_b: f64,
    pub endpoints_correct: bool,
}

/// Tie-aware Kendall tau-b. Zero when either variable is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {
                    tie_x += 1;
                    tie_y += 1;
                }
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (x.len() * x.len().saturating_sub(1) / 2) as i64;
    let denom = (((n0 - tie_x) * (n0 - tie_y)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) as f64 / denom
    }
}

/// Agreement of placements with the channel-sum order of `pairs`.
pub fn ordering_metrics(
    placements: &[ContinuumPlacement],
    pairs: &[LabeledPair],
) -> Result<OrderingMetrics, OrderingError> {
    if pairs.len() != 9 {
        return Err(OrderingError::WrongPairCount(pairs.len()));
    }
    let mut position = [f64::NAN; 9];
    for p in placements {
        let slot = &mut position[p.label.index()];
        if !slot.is_nan() {
            return Err(OrderingError::BadPlacements(p.label));
        }
        *slot = p.position;
    }
    if let Some(label) = PairLabel::ALL.iter().find(|l| position[l.index()].is_nan()) {
        return Err(OrderingError::BadPlacements(*label));
    }
    let truth: Vec<f64> = PairLabel::ALL.iter().map(|&l| pairs[l.index()].total_mm()).collect();
    let lowest = position.iter().copied().fold(f64::INFINITY, f64::min);
    let highest = position.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(OrderingMetrics {
        kendall_tau_b: kendall_tau_b(&truth, &position),
        endpoints_correct: position[PairLabel::A.index()] == lowest && position[PairLabel::I.index()] == highest,
    })
}
