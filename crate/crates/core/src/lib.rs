//! Engine for multi-point pressure psychophysics experiments: stimulus
//! types and the allowable stimulus range procedure, an asymmetric 2-down/1-up
//! staircase, the pair-ordering task, a simulated observer and a simulated
//! pressure device with its wire protocol.

pub mod config;
pub mod device;
pub mod export;
pub mod montecarlo;
pub mod observer;
pub mod ordering;
pub mod rng;
pub mod staircase;
pub mod stimulus;

pub use config::{ConfigError, ExperimentConfig};
pub use observer::{ComparisonResponder, Observer, ObserverParams};
pub use staircase::{JndEstimate, Staircase, StaircaseConfig, StaircaseState};
pub use stimulus::{AsrResult, ChannelId, ChannelSet, Judgment, Response, StimulusLevel, StimulusSpec};
