//! Transformed 2-down/1-up staircase with asymmetric fixed steps.
//!
//! Two consecutive correct responses lower the comparison by `step_down`;
//! any incorrect response raises it by `step_up`. Levels are clamped to the
//! registered ASR. A reversal is recorded, at the level where the reversing
//! response was given, whenever a response-driven move goes the other way
//! from the previous move. Clamping never creates a reversal on its own.

mod equilibrium;

pub use equilibrium::{equilibrium_percentile, Equilibrium, EquilibriumSettings, Psychometric};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimulus::{
    make_pair_schedule, AsrResult, ChannelSet, Judgment, PairOrder, Response, ScheduledPair, StimulusLevel,
    StimulusSpec, StimulusTiming,
};

pub const DEFAULT_STEP_UP_MM: f64 = 1.0;
pub const DEFAULT_STEP_RATIO: f64 = 0.7393;
pub const DEFAULT_REVERSALS_TO_STOP: usize = 16;
pub const DEFAULT_REVERSALS_FOR_ESTIMATE: usize = 3;
/// Reversals discarded as start-up transient by [`balanced_reversal_mean`].
pub const TRANSIENT_REVERSALS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StaircaseError {
    #[error("invalid staircase config: {0}")]
    Config(String),
    #[error("staircase is complete")]
    ProcedureComplete,
    #[error("staircase is not complete ({have} of {need} reversals)")]
    ProcedureIncomplete { have: usize, need: usize },
    #[error("no pending trial")]
    NoPendingTrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualPolicy {
    /// EQUAL means the difference went unnoticed.
    #[default]
    Incorrect,
    /// EQUAL discards the trial; the level is unchanged.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseConfig {
    pub reference_mm: f64,
    pub start_comparison_mm: f64,
    pub step_up_mm: f64,
    /// `step_down / step_up`.
    pub step_ratio_down_over_up: f64,
    pub n_reversals_to_stop: usize,
    pub n_reversals_for_estimate: usize,
    pub equal_counts_as: EqualPolicy,
    pub channel_set: ChannelSet,
    pub timing: StimulusTiming,
}

impl StaircaseConfig {
    /// Defaults for a staircase on `channel_set` against `asr`: the
    /// reference is the ASR midpoint and the start level sits halfway between
    /// the reference and the ASR maximum.
    pub fn for_asr(asr: &AsrResult, channel_set: ChannelSet) -> Self {
        Self {
            reference_mm: asr.reference_mm,
            start_comparison_mm: default_start_mm(asr),
            step_up_mm: DEFAULT_STEP_UP_MM,
            step_ratio_down_over_up: DEFAULT_STEP_RATIO,
            n_reversals_to_stop: DEFAULT_REVERSALS_TO_STOP,
            n_reversals_for_estimate: DEFAULT_REVERSALS_FOR_ESTIMATE,
            equal_counts_as: EqualPolicy::Incorrect,
            channel_set,
            timing: StimulusTiming::default(),
        }
    }

    pub fn step_down_mm(&self) -> f64 {
        self.step_up_mm * self.step_ratio_down_over_up
    }

    pub fn validate(&self, asr: &AsrResult) -> Result<(), StaircaseError> {
        let err = |m: String| Err(StaircaseError::Config(m));
        let r = self.step_ratio_down_over_up;
        if !(self.step_up_mm.is_finite() && self.step_up_mm > 0.0) {
            return err(format!("step_up_mm must be positive, got {}", self.step_up_mm));
        }
        if !(r.is_finite() && r > 0.0 && r <= 1.0) {
            return err(format!("step ratio must lie in (0, 1], got {r}"));
        }
        if self.n_reversals_to_stop < 4 {
            return err(format!("n_reversals_to_stop must be >= 4, got {}", self.n_reversals_to_stop));
        }
        if self.n_reversals_for_estimate == 0 || self.n_reversals_for_estimate > self.n_reversals_to_stop {
            return err(format!(
                "n_reversals_for_estimate must lie in 1..={}, got {}",
                self.n_reversals_to_stop, self.n_reversals_for_estimate
            ));
        }
        if self.start_comparison_mm.partial_cmp(&self.reference_mm) != Some(Ordering::Greater) {
            return err(format!(
                "start level {} mm must exceed reference {} mm",
                self.start_comparison_mm, self.reference_mm
            ));
        }
        for (name, v) in [("start", self.start_comparison_mm), ("reference", self.reference_mm)] {
            if !asr.contains(v) {
                return err(format!(
                    "{name} level {v} mm outside ASR [{}, {}]",
                    asr.detection_threshold_mm, asr.max_comfortable_mm
                ));
            }
        }
        if self.timing.hold_ms == 0 {
            return err("hold duration must be positive".into());
        }
        Ok(())
    }
}

pub fn default_start_mm(asr: &AsrResult) -> f64 {
    asr.reference_mm + 0.5 * (asr.max_comfortable_mm - asr.reference_mm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Up,
    Down,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: u64,
    pub reference_first: bool,
    pub comparison_mm: f64,
    pub response: Response,
    pub scored_correct: bool,
    pub reversal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingTrial {
    pub trial_index: u64,
    pub order: PairOrder,
    pub comparison_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseState {
    pub current_comparison_mm: f64,
    /// Correct responses since the last move (0 or 1).
    pub consecutive_correct: u8,
    pub last_move_direction: Direction,
    pub reversal_levels_mm: Vec<f64>,
    pub trial_log: Vec<TrialRecord>,
    pub complete: bool,
    pub pending: Option<PendingTrial>,
    /// Presentations issued so far, including discarded ones.
    pub presentations: u64,
    pub discarded_trials: u64,
}

/// Result of one scored response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub level_before_mm: f64,
    pub level_after_mm: f64,
    /// Level before clamping to the ASR.
    pub unclamped_after_mm: f64,
    pub moved: Direction,
    pub reversal: bool,
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Correct,
    Incorrect,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Discarded { trial_index: u64 },
    Scored { record: TrialRecord, step: StepOutcome },
}

/// Scores a three-way judgment. Correct means the comparison (the higher
/// level) was identified as greater.
pub fn score_judgment(judgment: Judgment, order: PairOrder, policy: EqualPolicy) -> Scoring {
    match (judgment, order) {
        (Judgment::Equal, _) => match policy {
            EqualPolicy::Incorrect => Scoring::Incorrect,
            EqualPolicy::Ignore => Scoring::Ignored,
        },
        (Judgment::FirstGreater, PairOrder::ComparisonFirst) | (Judgment::FirstLess, PairOrder::ReferenceFirst) => {
            Scoring::Correct
        }
        _ => Scoring::Incorrect,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JndEstimate {
    /// Mean of the last `n_reversals_for_estimate` reversal levels.
    pub converged_level_mm: f64,
    /// Sample standard deviation (n - 1) of those levels; 0 for a single level.
    pub converged_level_sd_mm: f64,
    pub jnd_delta_mm: f64,
    pub reference_mm: f64,
    pub n_reversals_used: usize,
}

impl JndEstimate {
    /// Summary over a set of reversal levels. Summation runs in slice order.
    pub fn from_levels(levels: &[f64], reference_mm: f64) -> Self {
        let n = levels.len();
        let mean = levels.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (levels.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            converged_level_mm: mean,
            converged_level_sd_mm: sd,
            jnd_delta_mm: mean - reference_mm,
            reference_mm,
            n_reversals_used: n,
        }
    }
}

/// One staircase: its configuration, the ASR it is clamped to and the
/// seed of its presentation-order schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Staircase {
    config: StaircaseConfig,
    asr: AsrResult,
    schedule_seed: u64,
    state: StaircaseState,
}

/// A pair of stimuli ready for presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub trial_index: u64,
    pub comparison_mm: f64,
    pub pair: ScheduledPair,
}

impl Staircase {
    pub fn new(config: StaircaseConfig, asr: AsrResult, schedule_seed: u64) -> Result<Self, StaircaseError> {
        config.validate(&asr)?;
        let state = StaircaseState {
            current_comparison_mm: config.start_comparison_mm,
            consecutive_correct: 0,
            last_move_direction: Direction::None,
            reversal_levels_mm: Vec::new(),
            trial_log: Vec::new(),
            complete: false,
            pending: None,
            presentations: 0,
            discarded_trials: 0,
        };
        Ok(Self { config, asr, schedule_seed, state })
    }

    pub fn config(&self) -> &StaircaseConfig {
        &self.config
    }

    pub fn asr(&self) -> &AsrResult {
        &self.asr
    }

    pub fn state(&self) -> &StaircaseState {
        &self.state
    }

    pub fn is_complete(&self) -> bool {
        self.state.complete
    }

    fn spec_at(&self, mm: f64) -> StimulusSpec {
        let level = StimulusLevel::new(mm).expect("levels stay inside the ASR");
        StimulusSpec::uniform(&self.config.channel_set, level, self.config.timing)
            .expect("validated channel set and timing")
    }

    /// The pending presentation, creating one if none is outstanding.
    pub fn next_trial(&mut self) -> Result<Presentation, StaircaseError> {
        if self.state.complete {
            return Err(StaircaseError::ProcedureComplete);
        }
        let pending = match self.state.pending {
            Some(p) => p,
            None => {
                let trial_index = self.state.presentations;
                let reference = self.spec_at(self.config.reference_mm);
                let comparison = self.spec_at(self.state.current_comparison_mm);
                let pair = make_pair_schedule(&reference, &comparison, self.schedule_seed, trial_index);
                let p =
                    PendingTrial { trial_index, order: pair.order, comparison_mm: self.state.current_comparison_mm };
                self.state.presentations += 1;
                self.state.pending = Some(p);
                p
            }
        };
        Ok(self.presentation_for(pending))
    }

    /// The pending presentation without creating one.
    pub fn pending(&self) -> Option<Presentation> {
        self.state.pending.map(|p| self.presentation_for(p))
    }

    fn presentation_for(&self, p: PendingTrial) -> Presentation {
        let reference = self.spec_at(self.config.reference_mm);
        let comparison = self.spec_at(p.comparison_mm);
        let pair = match p.order {
            PairOrder::ReferenceFirst => ScheduledPair { order: p.order, first: reference, second: comparison },
            PairOrder::ComparisonFirst => ScheduledPair { order: p.order, first: comparison, second: reference },
        };
        Presentation { trial_index: p.trial_index, comparison_mm: p.comparison_mm, pair }
    }

    pub fn score_response(&self, response: &Response) -> Result<Scoring, StaircaseError> {
        let pending = self.state.pending.ok_or(StaircaseError::NoPendingTrial)?;
        Ok(score_judgment(response.judgment, pending.order, self.config.equal_counts_as))
    }

    /// Apply a scored response to the level, counters and reversal log.
    pub fn apply_response(&mut self, scored_correct: bool) -> Result<StepOutcome, StaircaseError> {
        if self.state.complete {
            return Err(StaircaseError::ProcedureComplete);
        }
        let s = &mut self.state;
        let before = s.current_comparison_mm;
        let moved = if scored_correct {
            s.consecutive_correct += 1;
            if s.consecutive_correct >= 2 {
                s.consecutive_correct = 0;
                Direction::Down
            } else {
                Direction::None
            }
        } else {
            s.consecutive_correct = 0;
            Direction::Up
        };
        let unclamped = match moved {
            Direction::Up => before + self.config.step_up_mm,
            Direction::Down => before - self.config.step_down_mm(),
            Direction::None => before,
        };
        let after = unclamped.clamp(self.asr.detection_threshold_mm, self.asr.max_comfortable_mm);
        let mut reversal = false;
        if moved != Direction::None {
            if s.last_move_direction != Direction::None && s.last_move_direction != moved {
                reversal = true;
                s.reversal_levels_mm.push(before);
                if s.reversal_levels_mm.len() >= self.config.n_reversals_to_stop {
                    s.complete = true;
                }
            }
            s.last_move_direction = moved;
        }
        s.current_comparison_mm = after;
        Ok(StepOutcome {
            level_before_mm: before,
            level_after_mm: after,
            unclamped_after_mm: unclamped,
            moved,
            reversal,
            complete: s.complete,
        })
    }

    /// Score the response to the pending trial, apply it and log the trial.
    pub fn submit(&mut self, response: Response) -> Result<TrialOutcome, StaircaseError> {
        let scoring = self.score_response(&response)?;
        let pending = self.state.pending.take().expect("checked by score_response");
        match scoring {
            Scoring::Ignored => {
                self.state.discarded_trials += 1;
                Ok(TrialOutcome::Discarded { trial_index: pending.trial_index })
            }
            Scoring::Correct | Scoring::Incorrect => {
                let correct = scoring == Scoring::Correct;
                let step = self.apply_response(correct)?;
                let record = TrialRecord {
                    trial_index: pending.trial_index,
                    reference_first: pending.order.reference_first(),
                    comparison_mm: pending.comparison_mm,
                    response,
                    scored_correct: correct,
                    reversal: step.reversal,
                };
                self.state.trial_log.push(record.clone());
                Ok(TrialOutcome::Scored { record, step })
            }
        }
    }

    pub fn estimate_jnd(&self) -> Result<JndEstimate, StaircaseError> {
        estimate_jnd(&self.state, &self.config)
    }
}

/// Mean and sample sd over the last `n_reversals_for_estimate` reversals.
pub fn estimate_jnd(state: &StaircaseState, config: &StaircaseConfig) -> Result<JndEstimate, StaircaseError> {
    if !state.complete {
        return Err(StaircaseError::ProcedureIncomplete {
            have: state.reversal_levels_mm.len(),
            need: config.n_reversals_to_stop,
        });
    }
    let levels = &state.reversal_levels_mm;
    let k = config.n_reversals_for_estimate.min(levels.len());
    Ok(JndEstimate::from_levels(&levels[levels.len() - k..], config.reference_mm))
}

/// Mean reversal level after the start-up transient, over an even number of
/// reversals so that peaks and valleys are equally represented. Estimates the
/// staircase's asymptotic level; `None` if fewer than two reversals remain.
pub fn balanced_reversal_mean(reversals: &[f64], discard: usize) -> Option<f64> {
    let tail = reversals.get(discard..)?;
    let even = tail.len() - tail.len() % 2;
    if even == 0 {
        return None;
    }
    let used = &tail[tail.len() - even..];
    Some(used.iter().sum::<f64>() / even as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimulus::ChannelId;
    use approx::assert_abs_diff_eq;

    fn asr() -> AsrResult {
        AsrResult::new(4.0, 16.8).unwrap()
    }

    fn one_site() -> ChannelSet {
        ChannelSet::single(ChannelId::new(0).unwrap())
    }

    fn config() -> StaircaseConfig {
        StaircaseConfig::for_asr(&asr(), one_site())
    }

    fn resp(j: Judgment) -> Response {
        Response::new(j, 500)
    }

    #[test]
    fn default_config_values() {
        let c = config();
        assert_eq!(c.reference_mm, 10.4);
        assert_abs_diff_eq!(c.start_comparison_mm, 13.6, epsilon = 1e-12);
        assert_eq!(c.n_reversals_to_stop, 16);
        assert_eq!(c.n_reversals_for_estimate, 3);
        assert_eq!(c.step_ratio_down_over_up, 0.7393);
    }

    #[test]
    fn init_at_start_level() {
        let mut c = config();
        c.start_comparison_mm = 13.6;
        let s = Staircase::new(c, asr(), 1).unwrap();
        assert_eq!(s.state().current_comparison_mm, 13.6);
        assert!(s.state().reversal_levels_mm.is_empty());
        assert!(!s.is_complete());
    }

    #[test]
    fn init_rejects_start_outside_asr() {
        let mut c = config();
        c.start_comparison_mm = 3.0;
        assert!(matches!(Staircase::new(c, asr(), 1), Err(StaircaseError::Config(_))));
        let mut c = config();
        c.start_comparison_mm = 10.0;
        assert!(matches!(Staircase::new(c, asr(), 1), Err(StaircaseError::Config(_))));
        let mut c = config();
        c.n_reversals_for_estimate = 17;
        assert!(Staircase::new(c, asr(), 1).is_err());
    }

    #[test]
    fn two_correct_step_down_then_incorrect_reverses() {
        let mut c = config();
        c.start_comparison_mm = 13.6;
        let mut s = Staircase::new(c, asr(), 1).unwrap();
        // Establish a previous DOWN move.
        let a = s.apply_response(true).unwrap();
        assert_eq!(a.moved, Direction::None);
        let b = s.apply_response(true).unwrap();
        assert_eq!(b.moved, Direction::Down);
        assert_abs_diff_eq!(b.level_after_mm, 12.8607, epsilon = 1e-12);
        let c = s.apply_response(false).unwrap();
        assert_eq!(c.moved, Direction::Up);
        assert!(c.reversal);
        assert_abs_diff_eq!(c.level_after_mm, 13.8607, epsilon = 1e-12);
        assert_eq!(s.state().reversal_levels_mm, vec![b.level_after_mm]);
    }

    #[test]
    fn clamp_at_rail_is_not_a_reversal() {
        let mut c = config();
        c.start_comparison_mm = 16.8;
        let mut s = Staircase::new(c, asr(), 1).unwrap();
        let a = s.apply_response(false).unwrap();
        assert_eq!(a.level_after_mm, 16.8);
        assert_eq!(a.unclamped_after_mm, 17.8);
        let b = s.apply_response(false).unwrap();
        assert_eq!(b.level_after_mm, 16.8);
        assert!(!a.reversal && !b.reversal);
        assert!(s.state().reversal_levels_mm.is_empty());
    }

    #[test]
    fn scoring_rules() {
        use Judgment::*;
        use PairOrder::*;
        let p = EqualPolicy::Incorrect;
        assert_eq!(score_judgment(FirstGreater, ComparisonFirst, p), Scoring::Correct);
        assert_eq!(score_judgment(FirstGreater, ReferenceFirst, p), Scoring::Incorrect);
        assert_eq!(score_judgment(FirstLess, ReferenceFirst, p), Scoring::Correct);
        assert_eq!(score_judgment(FirstLess, ComparisonFirst, p), Scoring::Incorrect);
        assert_eq!(score_judgment(Equal, ComparisonFirst, p), Scoring::Incorrect);
        assert_eq!(score_judgment(Equal, ReferenceFirst, EqualPolicy::Ignore), Scoring::Ignored);
    }

    #[test]
    fn score_without_pending_is_protocol_error() {
        let s = Staircase::new(config(), asr(), 1).unwrap();
        assert_eq!(s.score_response(&resp(Judgment::Equal)), Err(StaircaseError::NoPendingTrial));
    }

    #[test]
    fn next_trial_is_idempotent_and_structured() {
        let mut s = Staircase::new(config(), asr(), 9).unwrap();
        let a = s.next_trial().unwrap();
        let b = s.next_trial().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pair.first.channel_count(), 1);
        assert_eq!(a.pair.second.channel_count(), 1);
    }

    #[test]
    fn two_channel_specs_drive_both_channels_to_one_level() {
        let set = ChannelSet::from_indices(&[0, 1]).unwrap();
        let mut s = Staircase::new(StaircaseConfig::for_asr(&asr(), set), asr(), 3).unwrap();
        let p = s.next_trial().unwrap();
        for spec in [&p.pair.first, &p.pair.second] {
            let v: Vec<f64> = spec.level_values().collect();
            assert_eq!(v.len(), 2);
            assert_eq!(v[0], v[1]);
        }
    }

    #[test]
    fn ignore_policy_discards_equal() {
        let mut c = config();
        c.equal_counts_as = EqualPolicy::Ignore;
        let mut s = Staircase::new(c, asr(), 1).unwrap();
        let before = s.state().current_comparison_mm;
        s.next_trial().unwrap();
        let out = s.submit(resp(Judgment::Equal)).unwrap();
        assert_eq!(out, TrialOutcome::Discarded { trial_index: 0 });
        assert_eq!(s.state().current_comparison_mm, before);
        assert!(s.state().trial_log.is_empty());
        assert_eq!(s.next_trial().unwrap().trial_index, 1);
    }

    fn drive_to_completion(s: &mut Staircase) {
        // Alternate: two correct, one incorrect; reverses every move.
        let mut i = 0u64;
        while !s.is_complete() {
            let p = s.next_trial().unwrap();
            let correct = i % 3 != 2;
            let j = match (correct, p.pair.order) {
                (true, PairOrder::ComparisonFirst) | (false, PairOrder::ReferenceFirst) => Judgment::FirstGreater,
                _ => Judgment::FirstLess,
            };
            s.submit(resp(j)).unwrap();
            i += 1;
        }
    }

    #[test]
    fn completes_at_sixteen_reversals_then_refuses_trials() {
        let mut s = Staircase::new(config(), asr(), 5).unwrap();
        drive_to_completion(&mut s);
        assert_eq!(s.state().reversal_levels_mm.len(), 16);
        assert_eq!(s.next_trial(), Err(StaircaseError::ProcedureComplete));
        assert_eq!(s.apply_response(true), Err(StaircaseError::ProcedureComplete));
    }

    #[test]
    fn estimate_examples() {
        let e = JndEstimate::from_levels(&[12.3, 11.8, 12.8], 10.4);
        assert_abs_diff_eq!(e.converged_level_mm, 12.3, epsilon = 1e-12);
        assert_abs_diff_eq!(e.converged_level_sd_mm, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e.jnd_delta_mm, 1.9, epsilon = 1e-12);
        assert_eq!(e.jnd_delta_mm, e.converged_level_mm - e.reference_mm);

        let flat = JndEstimate::from_levels(&[11.0, 11.0, 11.0], 10.4);
        assert_eq!(flat.converged_level_mm, 11.0);
        assert_eq!(flat.converged_level_sd_mm, 0.0);
    }

    #[test]
    fn estimate_requires_completion() {
        let s = Staircase::new(config(), asr(), 1).unwrap();
        assert_eq!(s.estimate_jnd(), Err(StaircaseError::ProcedureIncomplete { have: 0, need: 16 }));
    }

    #[test]
    fn balanced_mean_uses_even_tail() {
        assert_eq!(balanced_reversal_mean(&[9.0, 1.0, 2.0, 3.0, 4.0], 1), Some(2.5));
        assert_eq!(balanced_reversal_mean(&[9.0, 1.0, 2.0, 3.0], 1), Some(2.5));
        assert_eq!(balanced_reversal_mean(&[1.0, 2.0], 1), None);
        assert_eq!(balanced_reversal_mean(&[1.0], 4), None);
    }
}
