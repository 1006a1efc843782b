//! Experiment configuration file (TOML).
//!
//! Every section is optional and falls back to defaults; see
//! `configs/experiment.toml` at the repository root for the full schema.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::DeviceParams;
use crate::observer::{ObserverInput, ObserverParams, Summation};
use crate::staircase::{
    EqualPolicy, DEFAULT_REVERSALS_FOR_ESTIMATE, DEFAULT_REVERSALS_TO_STOP, DEFAULT_STEP_RATIO, DEFAULT_STEP_UP_MM,
};
use crate::stimulus::{AsrProcedure, ChannelId, ChannelSet, StimulusTiming};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

impl ConfigError {
    pub fn field(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Field { path: path.to_string(), message: message.into() }
    }

    /// Dotted path of the offending field, if known.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { path, .. } => Some(path),
            ConfigError::Parse(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelsConfig {
    pub one_site: Vec<u8>,
    pub two_site: Vec<u8>,
}

impl Default for ChannelsConfig {
    fn default() -> Self {
        Self { one_site: vec![0], two_site: vec![0, 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub ascending_step_mm: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self { ascending_step_mm: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaircaseSection {
    pub step_up_mm: f64,
    pub step_ratio_down_over_up: f64,
    pub n_reversals_to_stop: usize,
    pub n_reversals_for_estimate: usize,
    pub equal_counts_as: EqualPolicy,
    /// Fraction of the way from the reference to the ASR maximum.
    pub start_fraction: f64,
    /// Simulated runs give up after this many trials.
    pub trial_cap: u64,
}

impl Default for StaircaseSection {
    fn default() -> Self {
        Self {
            step_up_mm: DEFAULT_STEP_UP_MM,
            step_ratio_down_over_up: DEFAULT_STEP_RATIO,
            n_reversals_to_stop: DEFAULT_REVERSALS_TO_STOP,
            n_reversals_for_estimate: DEFAULT_REVERSALS_FOR_ESTIMATE,
            equal_counts_as: EqualPolicy::Incorrect,
            start_fraction: 0.5,
            trial_cap: 10_000,
        }
    }
}

/// A named preset with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverSection {
    pub preset: String,
    pub intensity_exponent: Option<f64>,
    pub threshold_mm: Option<f64>,
    pub summation: Option<Summation>,
    pub weber_fraction: Option<f64>,
    pub noise_floor: Option<f64>,
    pub equality_band: Option<f64>,
    pub asr_detection_mm: Option<f64>,
    pub asr_max_comfortable_mm: Option<f64>,
    pub input: Option<ObserverInput>,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self {
            preset: "paper-like".into(),
            intensity_exponent: None,
            threshold_mm: None,
            summation: None,
            weber_fraction: None,
            noise_floor: None,
            equality_band: None,
            asr_detection_mm: None,
            asr_max_comfortable_mm: None,
            input: None,
        }
    }
}

impl ObserverSection {
    pub fn resolve(&self) -> Result<ObserverParams, ConfigError> {
        let mut p =
            ObserverParams::preset(&self.preset).map_err(|e| ConfigError::field("observer.preset", e.to_string()))?;
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        apply!(
            intensity_exponent,
            threshold_mm,
            summation,
            weber_fraction,
            noise_floor,
            equality_band,
            asr_detection_mm,
            asr_max_comfortable_mm,
            input
        );
        p.validate().map_err(|e| match e {
            crate::observer::ObserverError::Invalid { field, message } => {
                ConfigError::field(&format!("observer.{field}"), message)
            }
            other => ConfigError::field("observer", other.to_string()),
        })?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    /// Force samples per second written to the session log.
    pub force_log_hz: u32,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self { force_log_hz: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub channels: ChannelsConfig,
    pub timing: StimulusTiming,
    pub asr: AsrConfig,
    pub staircase: StaircaseSection,
    pub observer: ObserverSection,
    pub device: DeviceParams,
    pub logging: LoggingConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn f(path: &str, message: impl Into<String>) -> ConfigError {
            ConfigError::field(path, message)
        }
        let a = &self.device.actuator;
        if !(a.stroke_mm.is_finite() && a.stroke_mm > 0.0) {
            return Err(f("device.actuator.stroke_mm", format!("must be positive, got {}", a.stroke_mm)));
        }
        self.device.validate().map_err(|e| match e {
            crate::device::DeviceError::Invalid { field, message } => f(&format!("device.{field}"), message),
            other => f("device", other.to_string()),
        })?;
        self.one_site()?;
        let two = self.two_site()?;
        if two.len() != 2 {
            return Err(f("channels.two_site", "must list exactly two channels"));
        }
        for (path, set) in [("channels.one_site", self.one_site()?), ("channels.two_site", two)] {
            if let Some(c) = set.iter().find(|c| c.index() >= usize::from(self.device.channels)) {
                return Err(f(path, format!("{c} exceeds device.channels = {}", self.device.channels)));
            }
        }
        if self.timing.hold_ms == 0 {
            return Err(f("timing.hold_ms", "must be positive"));
        }
        let step = self.asr.ascending_step_mm;
        if !(step.is_finite() && step > 0.0) {
            return Err(f("asr.ascending_step_mm", format!("must be positive, got {step}")));
        }
        let s = &self.staircase;
        if !(s.step_up_mm.is_finite() && s.step_up_mm > 0.0) {
            return Err(f("staircase.step_up_mm", format!("must be positive, got {}", s.step_up_mm)));
        }
        let r = s.step_ratio_down_over_up;
        if !(r.is_finite() && r > 0.0 && r <= 1.0) {
            return Err(f("staircase.step_ratio_down_over_up", format!("must lie in (0, 1], got {r}")));
        }
        if s.n_reversals_to_stop < 4 {
            return Err(f("staircase.n_reversals_to_stop", "must be >= 4"));
        }
        if s.n_reversals_for_estimate == 0 || s.n_reversals_for_estimate > s.n_reversals_to_stop {
            return Err(f("staircase.n_reversals_for_estimate", "must lie in 1..=n_reversals_to_stop"));
        }
        if !(s.start_fraction > 0.0 && s.start_fraction <= 1.0) {
            return Err(f("staircase.start_fraction", "must lie in (0, 1]"));
        }
        if s.trial_cap == 0 {
            return Err(f("staircase.trial_cap", "must be positive"));
        }
        if self.logging.force_log_hz == 0 || self.logging.force_log_hz > a.tick_rate_hz {
            return Err(f("logging.force_log_hz", format!("must lie in 1..={}", a.tick_rate_hz)));
        }
        self.observer.resolve()?;
        Ok(())
    }

    fn set(path: &str, raw: &[u8]) -> Result<ChannelSet, ConfigError> {
        let ids = raw
            .iter()
            .map(|&i| ChannelId::new(i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ConfigError::field(path, e.to_string()))?;
        let set = ChannelSet::new(ids).map_err(|e| ConfigError::field(path, e.to_string()))?;
        if set.len() != raw.len() {
            return Err(ConfigError::field(path, "duplicate channel"));
        }
        Ok(set)
    }

    pub fn one_site(&self) -> Result<ChannelSet, ConfigError> {
        Self::set("channels.one_site", &self.channels.one_site)
    }

    pub fn two_site(&self) -> Result<ChannelSet, ConfigError> {
        Self::set("channels.two_site", &self.channels.two_site)
    }

    pub fn asr_procedure(&self) -> AsrProcedure {
        AsrProcedure {
            ascending_step_mm: self.asr.ascending_step_mm,
            stroke_mm: self.device.actuator.stroke_mm,
            timing: self.timing,
        }
    }

    pub fn observer_params(&self) -> Result<ObserverParams, ConfigError> {
        self.observer.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_example_is_the_default() {
        let c = ExperimentConfig::from_toml(include_str!("../../../configs/experiment.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let uncommented = include_str!("../../../configs/experiment.toml")
            .lines()
            .map(|l| {
                l.strip_prefix("# ")
                    .filter(|r| {
                        r.split_once(" = ").is_some_and(|(k, _)| k.chars().all(|c| c.is_ascii_lowercase() || c == '_'))
                    })
                    .unwrap_or(l)
            })
            .map(|l| l.split("  #").next().unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        let c = ExperimentConfig::from_toml(&uncommented).unwrap();
        assert_eq!(c.observer_params().unwrap(), ObserverParams::paper_like());
    }

    #[test]
    fn empty_file_is_default() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.staircase.step_ratio_down_over_up, 0.7393);
        assert_eq!(c.logging.force_log_hz, 50);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn zero_stroke_names_field() {
        let e = ExperimentConfig::from_toml("[device.actuator]\nstroke_mm = 0.0").unwrap_err();
        assert_eq!(e.path(), Some("device.actuator.stroke_mm"));
    }

    #[test]
    fn field_paths_for_other_errors() {
        let cases = [
            ("[staircase]\nstep_ratio_down_over_up = 1.5", "staircase.step_ratio_down_over_up"),
            ("[channels]\ntwo_site = [0]", "channels.two_site"),
            ("[channels]\none_site = [7]", "channels.one_site"),
            ("[observer]\npreset = \"psychic\"", "observer.preset"),
            ("[observer]\nnoise_floor = -1.0", "observer.noise_floor"),
            ("[asr]\nascending_step_mm = 0.0", "asr.ascending_step_mm"),
        ];
        for (text, path) in cases {
            let e = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(e.path(), Some(path), "{text}: {e}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("colour = 3"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn observer_overrides_apply() {
        let c = ExperimentConfig::from_toml("[observer]\npreset = \"summing\"\nsummation = \"max\"").unwrap();
        let p = c.observer_params().unwrap();
        assert_eq!(p.summation, Summation::MAX);
        assert_eq!(p.weber_fraction, ObserverParams::summing().weber_fraction);
    }
}
