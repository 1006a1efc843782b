//! Simulated participant.
//!
//! Each site's commanded level maps to an internal intensity through a
//! thresholded power law. Sites combine by a Minkowski sum
//! `I = (sum_i I_i^p)^(1/p)`: `p = 1` is full spatial summation and the
//! `Max` rule (the `p -> inf` limit) is none. Judgments add Gaussian noise
//! with sd `weber_fraction * I + noise_floor` to each stimulus; differences
//! inside `equality_band` are reported as EQUAL.

use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::rng::SimRng;
use crate::staircase::{EqualPolicy, Psychometric};
use crate::stimulus::{AsrResponder, AsrSignal, Judgment, Response, StimulusSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("invalid observer parameter {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("unknown observer preset {0:?}")]
    UnknownPreset(String),
}

/// How per-site intensities combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Summation {
    Minkowski(f64),
    Max(MaxTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxTag {
    Max,
}

impl Summation {
    pub const FULL: Summation = Summation::Minkowski(1.0);
    pub const MAX: Summation = Summation::Max(MaxTag::Max);

    pub fn combine(&self, sites: impl Iterator<Item = f64>) -> f64 {
        match *self {
            Summation::Max(_) => sites.fold(0.0, f64::max),
            Summation::Minkowski(1.0) => sites.sum(),
            Summation::Minkowski(p) => sites.map(|s| s.powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

/// What the observer perceives: commanded levels (default) or measured
/// force from the device simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverInput {
    #[default]
    CommandedLevel,
    Force,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverParams {
    pub intensity_exponent: f64,
    pub threshold_mm: f64,
    pub summation: Summation,
    pub weber_fraction: f64,
    pub noise_floor: f64,
    /// Half-width of the EQUAL zone, internal intensity units.
    pub equality_band: f64,
    /// Single-site level reported as detected during ASR.
    pub asr_detection_mm: f64,
    /// Single-site level reported as max comfortable during ASR.
    pub asr_max_comfortable_mm: f64,
    #[serde(default)]
    pub input: ObserverInput,
}

pub const PRESET_NAMES: [&str; 3] = ["paper-like", "summing", "non-summing"];

impl ObserverParams {
    /// Full summation, floor-dominated noise and a wide EQUAL zone; puts a
    /// one-site staircase near 12.3 mm against a 10.4 mm reference.
    /// An assumption, not a fit to participant data.
    pub fn paper_like() -> Self {
        Self {
            intensity_exponent: 1.0,
            threshold_mm: 0.0,
            summation: Summation::FULL,
            weber_fraction: 0.01,
            noise_floor: 0.3,
            equality_band: 1.45,
            asr_detection_mm: 4.0,
            asr_max_comfortable_mm: 16.8,
            input: ObserverInput::CommandedLevel,
        }
    }

    /// Full summation with Weber-dominated noise and a narrow EQUAL zone.
    pub fn summing() -> Self {
        Self { weber_fraction: 0.05, noise_floor: 0.2, equality_band: 0.3, ..Self::paper_like() }
    }

    /// Paper-like noise with max combination across sites (no summation).
    pub fn non_summing() -> Self {
        Self { summation: Summation::MAX, ..Self::paper_like() }
    }

    pub fn preset(name: &str) -> Result<Self, ObserverError> {
        match name {
            "paper-like" => Ok(Self::paper_like()),
            "summing" => Ok(Self::summing()),
            "non-summing" => Ok(Self::non_summing()),
            other => Err(ObserverError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ObserverError> {
        let bad = |field, message: String| Err(ObserverError::Invalid { field, message });
        if !(self.intensity_exponent.is_finite() && self.intensity_exponent > 0.0) {
            return bad("intensity_exponent", format!("must be positive, got {}", self.intensity_exponent));
        }
        if !(self.threshold_mm.is_finite() && self.threshold_mm >= 0.0) {
            return bad("threshold_mm", format!("must be >= 0, got {}", self.threshold_mm));
        }
        if let Summation::Minkowski(p) = self.summation {
            if !(p.is_finite() && p >= 1.0) {
                return bad("summation", format!("Minkowski exponent must be >= 1, got {p}"));
            }
        }
        for (field, v) in [
            ("weber_fraction", self.weber_fraction),
            ("noise_floor", self.noise_floor),
            ("equality_band", self.equality_band),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("must be >= 0, got {v}"));
            }
        }
        if !(self.asr_detection_mm >= 0.0 && self.asr_detection_mm < self.asr_max_comfortable_mm) {
            return bad("asr_detection_mm", "must be >= 0 and below asr_max_comfortable_mm".into());
        }
        Ok(())
    }

    pub fn site_intensity(&self, level_mm: f64) -> f64 {
        let above = (level_mm - self.threshold_mm).max(0.0);
        if self.intensity_exponent == 1.0 {
            above
        } else {
            above.powf(self.intensity_exponent)
        }
    }

    /// Deterministic intensity of a set of per-site magnitudes.
    pub fn intensity_of(&self, sites: impl Iterator<Item = f64>) -> f64 {
        self.summation.combine(sites.map(|s| self.site_intensity(s)))
    }

    pub fn perceive(&self, spec: &StimulusSpec) -> f64 {
        self.intensity_of(spec.level_values())
    }

    pub fn noise_sd(&self, intensity: f64) -> f64 {
        self.weber_fraction * intensity + self.noise_floor
    }

    /// Closed-form probability that the comparison is judged greater, for
    /// uniform stimuli on `channel_count` sites. Presentation order does
    /// not matter: the noise is symmetric.
    pub fn psychometric(
        &self,
        reference_mm: f64,
        comparison_mm: f64,
        channel_count: usize,
        policy: EqualPolicy,
    ) -> f64 {
        let uniform = |mm: f64| self.intensity_of(std::iter::repeat_n(mm, channel_count));
        let (ir, ic) = (uniform(reference_mm), uniform(comparison_mm));
        let sd = self.noise_sd(ir).hypot(self.noise_sd(ic));
        let mu = ic - ir;
        let band = self.equality_band;
        let (greater, less) = if sd > 0.0 {
            (normal_cdf((mu - band) / sd), normal_cdf((-mu - band) / sd))
        } else {
            let g = if mu > band || (band == 0.0 && mu > 0.0) { 1.0 } else { 0.0 };
            let l = if -mu > band || (band == 0.0 && mu < 0.0) { 1.0 } else { 0.0 };
            (g, l)
        };
        match policy {
            EqualPolicy::Incorrect => greater,
            EqualPolicy::Ignore if greater + less > 0.0 => greater / (greater + less),
            EqualPolicy::Ignore => 0.5,
        }
    }

    /// Psychometric curve over comparison level for a fixed reference.
    pub fn curve(&self, reference_mm: f64, channel_count: usize, policy: EqualPolicy) -> PsychometricCurve<'_> {
        PsychometricCurve { params: self, reference_mm, channel_count, policy }
    }

    /// Comparison level (mm) at which `psychometric` reaches `target`, by
    /// bisection on `[reference, upper]`.
    pub fn level_for_p(&self, reference_mm: f64, upper_mm: f64, channel_count: usize, target: f64) -> Option<f64> {
        let f = |x| self.psychometric(reference_mm, x, channel_count, EqualPolicy::Incorrect) - target;
        let (mut lo, mut hi) = (reference_mm, upper_mm);
        if f(lo) > 0.0 || f(hi) < 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

pub struct PsychometricCurve<'a> {
    params: &'a ObserverParams,
    reference_mm: f64,
    channel_count: usize,
    policy: EqualPolicy,
}

impl Psychometric for PsychometricCurve<'_> {
    fn p_correct(&self, comparison_mm: f64) -> f64 {
        self.params.psychometric(self.reference_mm, comparison_mm, self.channel_count, self.policy)
    }
}

/// Answers two-stimulus comparisons.
pub trait ComparisonResponder {
    fn compare(&mut self, first: &StimulusSpec, second: &StimulusSpec) -> Response;
}

/// A seeded simulated participant.
#[derive(Debug, Clone)]
pub struct Observer {
    params: ObserverParams,
    rng: SimRng,
}

impl Observer {
    pub fn new(params: ObserverParams, seed: u64) -> Result<Self, ObserverError> {
        params.validate()?;
        Ok(Self { params, rng: SimRng::seed_from_u64(seed) })
    }

    pub fn params(&self) -> &ObserverParams {
        &self.params
    }

    pub fn perceive(&self, spec: &StimulusSpec) -> f64 {
        self.params.perceive(spec)
    }

    fn noisy(&mut self, intensity: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        intensity + self.params.noise_sd(intensity) * z
    }

    /// Judge two intensities (already perceived).
    pub fn compare_intensities(&mut self, first: f64, second: f64) -> Response {
        let d = self.noisy(first) - self.noisy(second);
        let judgment = if d.abs() < self.params.equality_band || d == 0.0 {
            Judgment::Equal
        } else if d > 0.0 {
            Judgment::FirstGreater
        } else {
            Judgment::FirstLess
        };
        // Harder judgments take longer.
        let latency_ms = 600 + (400.0 / (1.0 + d.abs())).round() as u32;
        Response::new(judgment, latency_ms)
    }

    pub fn detect_intensity(&mut self, intensity: f64) -> AsrSignal {
        let felt = self.noisy(intensity);
        let detect = self.params.site_intensity(self.params.asr_detection_mm);
        let comfort = self.params.site_intensity(self.params.asr_max_comfortable_mm);
        if felt >= comfort {
            AsrSignal::MaxComfortable
        } else if felt >= detect {
            AsrSignal::Detected
        } else {
            AsrSignal::NotDetected
        }
    }
}

impl ComparisonResponder for Observer {
    fn compare(&mut self, first: &StimulusSpec, second: &StimulusSpec) -> Response {
        let (a, b) = (self.perceive(first), self.perceive(second));
        self.compare_intensities(a, b)
    }
}

impl AsrResponder for Observer {
    fn respond_asr(&mut self, spec: &StimulusSpec) -> AsrSignal {
        let i = self.perceive(spec);
        self.detect_intensity(i)
    }
}
