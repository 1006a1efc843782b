//! Stimulus domain types, presentation scheduling and the allowable stimulus
//! range (ASR) procedure.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;

/// The device drives at most this many stimulators.
pub const MAX_CHANNELS: usize = 4;

/// Default actuator stroke, millimeters.
pub const DEFAULT_STROKE_MM: f64 = 20.0;

/// Position resolution of the device command path (0.01 mm).
pub const POSITION_RESOLUTION_MM: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StimulusError {
    #[error("channel index {0} out of range (0..{MAX_CHANNELS})")]
    ChannelOutOfRange(u8),
    #[error("stimulus level {0} mm is not a finite non-negative value")]
    InvalidLevel(f64),
    #[error("stimulus level {level} mm exceeds stroke limit {stroke} mm")]
    BeyondStroke { level: f64, stroke: f64 },
    #[error("channel set is empty")]
    EmptyChannelSet,
    #[error("stimulus spec has no channels")]
    EmptySpec,
    #[error("hold duration must be positive")]
    ZeroHold,
    #[error("level {level} mm on channel {channel} lies outside the registered ASR [{lo}, {hi}]")]
    OutsideAsr { channel: ChannelId, level: f64, lo: f64, hi: f64 },
    #[error("invalid ASR bounds: detection {detection} mm must be below max comfortable {max} mm")]
    InvalidAsr { detection: f64, max: f64 },
    #[error("ASR reference {reference} mm is not the midpoint of [{detection}, {max}]")]
    AsrMidpointMismatch { detection: f64, max: f64, reference: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsrError {
    #[error("ascending step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("channel set is empty")]
    EmptyChannelSet,
    #[error("stroke limit reached at {last_level_mm} mm before a max-comfortable signal")]
    AsrOutOfRange { last_level_mm: f64 },
    #[error("stroke limit reached at {last_level_mm} mm before detection")]
    NeverDetected { last_level_mm: f64 },
    #[error("max comfortable signalled at {0} mm with no lower detected level")]
    DegenerateRange(f64),
}

/// One of up to four stimulator channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(into = "u8")]
pub struct ChannelId(u8);

// Accepts a number or a numeric string: JSON map keys arrive as strings.
impl<'de> Deserialize<'de> for ChannelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = ChannelId;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a channel index")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<ChannelId, E> {
                let raw = u8::try_from(v).map_err(E::custom)?;
                ChannelId::new(raw).map_err(E::custom)
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<ChannelId, E> {
                self.visit_u64(u64::try_from(v).map_err(E::custom)?)
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<ChannelId, E> {
                self.visit_u64(v.parse().map_err(E::custom)?)
            }
        }
        d.deserialize_any(V)
    }
}

impl ChannelId {
    pub fn new(index: u8) -> Result<Self, StimulusError> {
        if usize::from(index) < MAX_CHANNELS {
            Ok(Self(index))
        } else {
            Err(StimulusError::ChannelOutOfRange(index))
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn raw(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for ChannelId {
    type Error = StimulusError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ChannelId> for u8 {
    fn from(c: ChannelId) -> u8 {
        c.0
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

/// Sorted, duplicate-free, non-empty set of channels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChannelId>", into = "Vec<ChannelId>")]
pub struct ChannelSet(Vec<ChannelId>);

impl ChannelSet {
    pub fn new(mut channels: Vec<ChannelId>) -> Result<Self, StimulusError> {
        channels.sort_unstable();
        channels.dedup();
        if channels.is_empty() {
            return Err(StimulusError::EmptyChannelSet);
        }
        Ok(Self(channels))
    }

    pub fn from_indices(indices: &[u8]) -> Result<Self, StimulusError> {
        let channels = indices.iter().map(|&i| ChannelId::new(i)).collect::<Result<Vec<_>, _>>()?;
        Self::new(channels)
    }

    pub fn single(channel: ChannelId) -> Self {
        Self(vec![channel])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, channel: ChannelId) -> bool {
        self.0.binary_search(&channel).is_ok()
    }

    pub fn as_slice(&self) -> &[ChannelId] {
        &self.0
    }
}

impl TryFrom<Vec<ChannelId>> for ChannelSet {
    type Error = StimulusError;
    fn try_from(v: Vec<ChannelId>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ChannelSet> for Vec<ChannelId> {
    fn from(s: ChannelSet) -> Self {
        s.0
    }
}

/// Commanded actuator extension in millimeters. Used as the proxy for
/// pressure intensity throughout the engine.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StimulusLevel(f64);

impl StimulusLevel {
    pub const ZERO: StimulusLevel = StimulusLevel(0.0);

    pub fn new(mm: f64) -> Result<Self, StimulusError> {
        if mm.is_finite() && mm >= 0.0 {
            Ok(Self(mm))
        } else {
            Err(StimulusError::InvalidLevel(mm))
        }
    }

    pub fn within_stroke(mm: f64, stroke_mm: f64) -> Result<Self, StimulusError> {
        let level = Self::new(mm)?;
        if mm > stroke_mm {
            return Err(StimulusError::BeyondStroke { level: mm, stroke: stroke_mm });
        }
        Ok(level)
    }

    pub fn mm(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for StimulusLevel {
    type Error = StimulusError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<StimulusLevel> for f64 {
    fn from(l: StimulusLevel) -> f64 {
        l.0
    }
}

/// Snap a position to the 0.01 mm command resolution.
pub fn quantize_position_mm(mm: f64) -> f64 {
    (mm / POSITION_RESOLUTION_MM).round() * POSITION_RESOLUTION_MM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusTiming {
    pub hold_ms: u32,
    pub gap_ms: u32,
}

impl Default for StimulusTiming {
    fn default() -> Self {
        Self { hold_ms: 1000, gap_ms: 500 }
    }
}

/// A stimulus: per-channel commanded levels held for a fixed duration and
/// followed by a gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub levels: BTreeMap<ChannelId, StimulusLevel>,
    pub hold_duration_ms: u32,
    pub inter_stimulus_gap_ms: u32,
}

impl StimulusSpec {
    pub fn new(levels: BTreeMap<ChannelId, StimulusLevel>, timing: StimulusTiming) -> Result<Self, StimulusError> {
        if levels.is_empty() {
            return Err(StimulusError::EmptySpec);
        }
        if timing.hold_ms == 0 {
            return Err(StimulusError::ZeroHold);
        }
        Ok(Self { levels, hold_duration_ms: timing.hold_ms, inter_stimulus_gap_ms: timing.gap_ms })
    }

    /// Drive every channel in `channels` to the same level.
    pub fn uniform(channels: &ChannelSet, level: StimulusLevel, timing: StimulusTiming) -> Result<Self, StimulusError> {
        let levels = channels.iter().map(|c| (c, level)).collect();
        Self::new(levels, timing)
    }

    pub fn timing(&self) -> StimulusTiming {
        StimulusTiming { hold_ms: self.hold_duration_ms, gap_ms: self.inter_stimulus_gap_ms }
    }

    pub fn channel_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.levels.values().map(|l| l.mm())
    }

    /// Sum of commanded levels over all channels.
    pub fn total_level_mm(&self) -> f64 {
        self.level_values().sum()
    }

    pub fn check_stroke(&self, stroke_mm: f64) -> Result<(), StimulusError> {
        for level in self.levels.values() {
            if level.mm() > stroke_mm {
                return Err(StimulusError::BeyondStroke { level: level.mm(), stroke: stroke_mm });
            }
        }
        Ok(())
    }

    pub fn check_asr(&self, asr: &AsrResult) -> Result<(), StimulusError> {
        for (&channel, level) in &self.levels {
            if !asr.contains(level.mm()) {
                return Err(StimulusError::OutsideAsr {
                    channel,
                    level: level.mm(),
                    lo: asr.detection_threshold_mm,
                    hi: asr.max_comfortable_mm,
                });
            }
        }
        Ok(())
    }
}

/// Detection threshold, maximum comfortable level and their midpoint.
///
/// `reference_mm` is always `midpoint(detection, max)`: the sum is rounded
/// once to the nearest `f64` and the halving is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AsrResultRepr")]
pub struct AsrResult {
    pub detection_threshold_mm: f64,
    pub max_comfortable_mm: f64,
    pub reference_mm: f64,
}

#[derive(Deserialize)]
struct AsrResultRepr {
    detection_threshold_mm: f64,
    max_comfortable_mm: f64,
    reference_mm: f64,
}

impl TryFrom<AsrResultRepr> for AsrResult {
    type Error = StimulusError;
    fn try_from(r: AsrResultRepr) -> Result<Self, Self::Error> {
        let asr = AsrResult::new(r.detection_threshold_mm, r.max_comfortable_mm)?;
        if asr.reference_mm.to_bits() != r.reference_mm.to_bits() {
            return Err(StimulusError::AsrMidpointMismatch {
                detection: r.detection_threshold_mm,
                max: r.max_comfortable_mm,
                reference: r.reference_mm,
            });
        }
        Ok(asr)
    }
}

pub fn midpoint(lo: f64, hi: f64) -> f64 {
    (lo + hi) / 2.0
}

impl AsrResult {
    pub fn new(detection_threshold_mm: f64, max_comfortable_mm: f64) -> Result<Self, StimulusError> {
        let valid = detection_threshold_mm.is_finite()
            && max_comfortable_mm.is_finite()
            && detection_threshold_mm >= 0.0
            && detection_threshold_mm < max_comfortable_mm;
        if !valid {
            return Err(StimulusError::InvalidAsr { detection: detection_threshold_mm, max: max_comfortable_mm });
        }
        Ok(Self {
            detection_threshold_mm,
            max_comfortable_mm,
            reference_mm: midpoint(detection_threshold_mm, max_comfortable_mm),
        })
    }

    pub fn contains(&self, mm: f64) -> bool {
        mm >= self.detection_threshold_mm && mm <= self.max_comfortable_mm
    }
}

/// Limit a level to the ASR.
pub fn clamp_to_asr(level: StimulusLevel, asr: &AsrResult) -> StimulusLevel {
    StimulusLevel(level.0.clamp(asr.detection_threshold_mm, asr.max_comfortable_mm))
}

/// ASR results registered per channel set. Procedures on a channel set are
/// clamped to the range registered for it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AsrRegistry {
    entries: Vec<(ChannelSet, AsrResult)>,
}

impl AsrRegistry {
    pub fn register(&mut self, channels: ChannelSet, asr: AsrResult) {
        match self.entries.iter_mut().find(|(c, _)| *c == channels) {
            Some(entry) => entry.1 = asr,
            None => self.entries.push((channels, asr)),
        }
    }

    pub fn lookup(&self, channels: &ChannelSet) -> Option<&AsrResult> {
        self.entries.iter().find(|(c, _)| c == channels).map(|(_, a)| a)
    }

    /// Issue a uniform spec on `channels`, clamped to the registered ASR.
    pub fn clamped_spec(
        &self,
        channels: &ChannelSet,
        level: StimulusLevel,
        timing: StimulusTiming,
    ) -> Option<StimulusSpec> {
        let asr = self.lookup(channels)?;
        StimulusSpec::uniform(channels, clamp_to_asr(level, asr), timing).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Judgment {
    FirstGreater,
    Equal,
    FirstLess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub judgment: Judgment,
    pub latency_ms: u32,
}

impl Response {
    pub fn new(judgment: Judgment, latency_ms: u32) -> Self {
        Self { judgment, latency_ms }
    }
}

/// Participant signal during an ASR series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AsrSignal {
    NotDetected,
    Detected,
    MaxComfortable,
}

/// Anything that answers ASR presentations: a simulated observer or a
/// participant behind the session service.
pub trait AsrResponder {
    fn respond_asr(&mut self, spec: &StimulusSpec) -> AsrSignal;
}

impl<F: FnMut(&StimulusSpec) -> AsrSignal> AsrResponder for F {
    fn respond_asr(&mut self, spec: &StimulusSpec) -> AsrSignal {
        self(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsrProcedure {
    pub ascending_step_mm: f64,
    pub stroke_mm: f64,
    pub timing: StimulusTiming,
}

impl Default for AsrProcedure {
    fn default() -> Self {
        Self { ascending_step_mm: 0.5, stroke_mm: DEFAULT_STROKE_MM, timing: StimulusTiming::default() }
    }
}

impl AsrProcedure {
    /// Level of the `k`-th presentation (`k` starts at 1), snapped to the
    /// command resolution so that long series do not accumulate drift.
    pub fn level_at(&self, k: u32) -> f64 {
        quantize_position_mm(f64::from(k) * self.ascending_step_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrPresentation {
    pub level_mm: f64,
    pub signal: AsrSignal,
}

/// Completed ASR series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRun {
    pub result: AsrResult,
    pub series: Vec<AsrPresentation>,
    /// Levels reported undetected after an earlier detection.
    pub anomalies_mm: Vec<f64>,
}

/// Incremental ASR procedure: present `next_level`, feed back the signal.
///
/// Each presentation drives all channels in the set to the same level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSeries {
    pub channels: ChannelSet,
    pub procedure: AsrProcedure,
    k: u32,
    detection_mm: Option<f64>,
    series: Vec<AsrPresentation>,
    anomalies_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AsrStep {
    Continue,
    Done(AsrRun),
}

impl AsrSeries {
    pub fn new(channels: ChannelSet, procedure: AsrProcedure) -> Result<Self, AsrError> {
        let step = procedure.ascending_step_mm;
        if !(step.is_finite() && step > 0.0) {
            return Err(AsrError::InvalidStep(step));
        }
        if channels.is_empty() {
            return Err(AsrError::EmptyChannelSet);
        }
        Ok(Self { channels, procedure, k: 1, detection_mm: None, series: Vec::new(), anomalies_mm: Vec::new() })
    }

    /// Level to present next, or an error once the series has run past the
    /// stroke limit.
    pub fn next_level(&self) -> Result<f64, AsrError> {
        let level = self.procedure.level_at(self.k);
        if level > self.procedure.stroke_mm {
            let last_level_mm = self.procedure.level_at(self.k.saturating_sub(1));
            return Err(match self.detection_mm {
                Some(_) => AsrError::AsrOutOfRange { last_level_mm },
                None => AsrError::NeverDetected { last_level_mm },
            });
        }
        Ok(level)
    }

    pub fn next_spec(&self) -> Result<StimulusSpec, AsrError> {
        let level = StimulusLevel(self.next_level()?);
        Ok(StimulusSpec::uniform(&self.channels, level, self.procedure.timing)
            .expect("channel set is non-empty and hold validated"))
    }

    pub fn record(&mut self, signal: AsrSignal) -> Result<AsrStep, AsrError> {
        let level = self.next_level()?;
        self.series.push(AsrPresentation { level_mm: level, signal });
        self.k += 1;
        match signal {
            AsrSignal::NotDetected => {
                if self.detection_mm.is_some() {
                    log::warn!("ASR anomaly: undetected at {level} mm after an earlier detection");
                    self.anomalies_mm.push(level);
                }
                Ok(AsrStep::Continue)
            }
            AsrSignal::Detected => {
                self.detection_mm.get_or_insert(level);
                Ok(AsrStep::Continue)
            }
            AsrSignal::MaxComfortable => {
                let detection = self.detection_mm.ok_or(AsrError::DegenerateRange(level))?;
                let result = AsrResult::new(detection, level).map_err(|_| AsrError::DegenerateRange(level))?;
                Ok(AsrStep::Done(AsrRun {
                    result,
                    series: std::mem::take(&mut self.series),
                    anomalies_mm: std::mem::take(&mut self.anomalies_mm),
                }))
            }
        }
    }

    pub fn presented(&self) -> &[AsrPresentation] {
        &self.series
    }
}

/// Run a full ascending ASR series against `responder`.
///
/// The responder owns any randomness (its own seeded substream), so the
/// series itself is deterministic.
pub fn run_asr(
    channels: &ChannelSet,
    responder: &mut dyn AsrResponder,
    procedure: AsrProcedure,
) -> Result<AsrRun, AsrError> {
    let mut series = AsrSeries::new(channels.clone(), procedure)?;
    loop {
        let spec = series.next_spec()?;
        let signal = responder.respond_asr(&spec);
        if let AsrStep::Done(run) = series.record(signal)? {
            return Ok(run);
        }
    }
}

/// Which stimulus of a pair is presented first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairOrder {
    ReferenceFirst,
    ComparisonFirst,
}

impl PairOrder {
    pub fn reference_first(self) -> bool {
        matches!(self, PairOrder::ReferenceFirst)
    }
}

/// Presentation order for draw `draw_index` under `seed`. A pure function
/// of its arguments: each draw reads the first word of its own ChaCha
/// stream.
pub fn schedule_order(seed: u64, draw_index: u64) -> PairOrder {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    if rng.random::<bool>() {
        PairOrder::ReferenceFirst
    } else {
        PairOrder::ComparisonFirst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledPair {
    pub order: PairOrder,
    pub first: StimulusSpec,
    pub second: StimulusSpec,
}

pub fn make_pair_schedule(
    reference: &StimulusSpec,
    comparison: &StimulusSpec,
    seed: u64,
    draw_index: u64,
) -> ScheduledPair {
    let order = schedule_order(seed, draw_index);
    let (first, second) = match order {
        PairOrder::ReferenceFirst => (reference.clone(), comparison.clone()),
        PairOrder::ComparisonFirst => (comparison.clone(), reference.clone()),
    };
    ScheduledPair { order, first, second }
}
