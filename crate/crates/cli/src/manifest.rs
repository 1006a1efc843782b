use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hapsy_core::observer::Summation;
use hapsy_core::ExperimentConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("repetitions must be at least 1")]
    ZeroReps,
    #[error("{0} mode needs --out")]
    MissingOut(Mode),
    #[error("replay mode needs --log")]
    MissingLog,
    #[error("grid: {0}")]
    Grid(String),
    #[error("--grid only applies to sweep mode")]
    UnexpectedGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Serve,
    Replay,
    Sweep,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Simulate => "simulate",
            Mode::Serve => "serve",
            Mode::Replay => "replay",
            Mode::Sweep => "sweep",
        })
    }
}

/// Sweep axes. An axis left out of the grid string keeps the configured
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub ratios: Vec<f64>,
    pub summations: Vec<Summation>,
}

pub fn summation_label(s: Summation) -> String {
    match s {
        Summation::Minkowski(k) => format!("{k}"),
        Summation::Max(_) => "max".into(),
    }
}

fn parse_summation(v: &str) -> Result<Summation, String> {
    match v {
        "max" | "inf" => Ok(Summation::MAX),
        _ => {
            let k: f64 = v.parse().map_err(|_| format!("bad exponent {v:?}"))?;
            if k.is_finite() && k > 0.0 {
                Ok(Summation::Minkowski(k))
            } else {
                Err(format!("exponent must be positive, got {v}"))
            }
        }
    }
}

impl Grid {
    /// Parses `ratio=0.5,0.7393;exponent=1,2,max`.
    pub fn parse(text: &str, config: &ExperimentConfig) -> Result<Self, ManifestError> {
        let err = |m: String| ManifestError::Grid(m);
        let mut ratios = None;
        let mut summations = None;
        for axis in text.split(';').map(str::trim).filter(|a| !a.is_empty()) {
            let (name, values) =
                axis.split_once('=').ok_or_else(|| err(format!("expected name=values, got {axis:?}")))?;
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(err(format!("axis {name} has no values")));
            }
            match name.trim() {
                "ratio" => {
                    let r = values
                        .iter()
                        .map(|v| match v.parse::<f64>() {
                            Ok(r) if r > 0.0 && r <= 1.0 => Ok(r),
                            _ => Err(err(format!("ratio must be in (0, 1], got {v}"))),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    ratios = Some(r);
                }
                "exponent" => {
                    summations =
                        Some(values.iter().map(|v| parse_summation(v).map_err(err)).collect::<Result<Vec<_>, _>>()?);
                }
                other => return Err(err(format!("unknown axis {other:?} (use ratio, exponent)"))),
            }
        }
        if ratios.is_none() && summations.is_none() {
            return Err(err("empty grid".into()));
        }
        let observer = config.observer_params().map_err(|e| err(e.to_string()))?;
        Ok(Self {
            ratios: ratios.unwrap_or_else(|| vec![config.staircase.step_ratio_down_over_up]),
            summations: summations.unwrap_or_else(|| vec![observer.summation]),
        })
    }

    pub fn cells(&self) -> Vec<(f64, Summation)> {
        self.ratios.iter().flat_map(|&r| self.summations.iter().map(move |&s| (r, s))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub mode: Mode,
    pub reps: u64,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub grid: Option<Grid>,
    pub log: Option<PathBuf>,
    pub addr: SocketAddr,
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let Some(path) = path else { return Ok(ExperimentConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let config = ExperimentConfig::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    config.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(config)
}

impl RunManifest {
    pub fn new(mode: Mode, config: ExperimentConfig) -> Self {
        Self {
            config_path: None,
            seed: config.seed,
            config,
            mode,
            reps: 1,
            out: None,
            grid: None,
            log: None,
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
        }
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.reps == 0 {
            return Err(ManifestError::ZeroReps);
        }
        if self.grid.is_some() && self.mode != Mode::Sweep {
            return Err(ManifestError::UnexpectedGrid);
        }
        match self.mode {
            Mode::Simulate | Mode::Serve | Mode::Sweep if self.out.is_none() => {
                Err(ManifestError::MissingOut(self.mode))
            }
            Mode::Replay if self.log.is_none() => Err(ManifestError::MissingLog),
            Mode::Sweep if self.grid.is_none() => Err(ManifestError::Grid("empty grid".into())),
            _ => Ok(()),
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Mode as clap::ValueEnum>::from_str(s, true)
    }
}
