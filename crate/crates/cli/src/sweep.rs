//! Parameter sweeps over step ratio and summation exponent.
//!
//! Each cell runs paired one-site and two-site staircases against a
//! simulated observer registered with its own ASR, and compares the
//! one-site asymptote with the Markov-chain equilibrium of the analytic
//! psychometric.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use hapsy_core::montecarlo::{
    converged_percentile, run_batch, simulate_observer_staircase, summarize, SimulatedStaircase, Summary,
};
use hapsy_core::observer::{ObserverParams, Summation};
use hapsy_core::rng::{derive_seed, indexed_seed};
use hapsy_core::staircase::{equilibrium_percentile, EquilibriumSettings};
use hapsy_core::{AsrResult, ExperimentConfig};
use hapsy_session::engine::staircase_config;

use crate::manifest::{summation_label, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub exponent: String,
    pub runs: u64,
    /// Runs that hit the trial cap.
    pub capped: usize,
    /// Mean asymptotic one-site level and its analytic percentile.
    pub asymptote_mm: Option<f64>,
    pub converged_percentile: Option<f64>,
    /// Markov-chain equilibrium percentile for the same psychometric.
    pub oracle_percentile: Option<f64>,
    pub one_site_jnd_mm: Summary,
    pub two_site_jnd_mm: Summary,
    pub two_site_lower_fraction: f64,
}

/// The ASR the simulated observer would report.
pub fn observer_asr(params: &ObserverParams) -> anyhow::Result<AsrResult> {
    Ok(AsrResult::new(params.asr_detection_mm, params.asr_max_comfortable_mm)?)
}

pub struct CellRuns {
    pub one_site: Vec<SimulatedStaircase>,
    pub two_site: Vec<SimulatedStaircase>,
}

/// Paired staircases for one grid cell. Run `i` uses the same seed for both
/// channel sets.
pub fn run_cell(
    config: &ExperimentConfig,
    ratio: f64,
    summation: Summation,
    seed: u64,
    reps: u64,
) -> anyhow::Result<(ObserverParams, AsrResult, CellRuns)> {
    let mut params = config.observer_params()?;
    params.summation = summation;
    params.validate()?;
    let asr = observer_asr(&params)?;
    let mut one = staircase_config(config, &asr, config.one_site()?);
    let mut two = staircase_config(config, &asr, config.two_site()?);
    one.step_ratio_down_over_up = ratio;
    two.step_ratio_down_over_up = ratio;
    let cap = config.staircase.trial_cap;
    let run = |c: &hapsy_core::StaircaseConfig, stream: &str| -> anyhow::Result<Vec<SimulatedStaircase>> {
        run_batch(reps, |i| {
            simulate_observer_staircase(c.clone(), asr, &params, derive_seed(indexed_seed(seed, i), stream), cap)
        })
        .into_iter()
        .map(|r| r.map_err(anyhow::Error::from))
        .collect()
    };
    let runs = CellRuns { one_site: run(&one, "1site")?, two_site: run(&two, "2site")? };
    Ok((params, asr, runs))
}

pub fn sweep_cell(
    config: &ExperimentConfig,
    ratio: f64,
    summation: Summation,
    seed: u64,
    reps: u64,
) -> anyhow::Result<SweepRow> {
    let (params, asr, runs) = run_cell(config, ratio, summation, seed, reps)?;
    let policy = config.staircase.equal_counts_as;
    let curve = params.curve(asr.reference_mm, config.one_site()?.len(), policy);
    let converged = converged_percentile(&runs.one_site, &curve);
    let settings =
        EquilibriumSettings::new(asr.detection_threshold_mm, asr.max_comfortable_mm, config.staircase.step_up_mm);
    let oracle = equilibrium_percentile(ratio, &curve, &settings);
    let jnd = |v: &[SimulatedStaircase]| {
        summarize(&v.iter().filter_map(|r| r.estimate.as_ref().map(|e| e.jnd_delta_mm)).collect::<Vec<_>>())
    };
    let paired: Vec<bool> = runs
        .one_site
        .iter()
        .zip(&runs.two_site)
        .filter_map(|(a, b)| Some(b.estimate.as_ref()?.converged_level_mm < a.estimate.as_ref()?.converged_level_mm))
        .collect();
    let lower = paired.iter().filter(|&&b| b).count();
    Ok(SweepRow {
        ratio,
        exponent: summation_label(summation),
        runs: reps,
        capped: runs.one_site.iter().chain(&runs.two_site).filter(|r| !r.terminated()).count(),
        asymptote_mm: converged.map(|c| c.0),
        converged_percentile: converged.map(|c| c.1),
        oracle_percentile: oracle.percentile,
        one_site_jnd_mm: jnd(&runs.one_site),
        two_site_jnd_mm: jnd(&runs.two_site),
        two_site_lower_fraction: if paired.is_empty() { f64::NAN } else { lower as f64 / paired.len() as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: String,
    pub seed: u64,
    pub reps: u64,
    pub observer: String,
    pub rows: Vec<SweepRow>,
}

pub fn sweep(config: &ExperimentConfig, grid: &Grid, seed: u64, reps: u64) -> anyhow::Result<SweepReport> {
    let cells = grid.cells();
    anyhow::ensure!(!cells.is_empty(), "empty grid");
    let rows = cells
        .into_iter()
        .map(|(r, s)| {
            sweep_cell(config, r, s, seed, reps).with_context(|| format!("ratio {r}, exponent {}", summation_label(s)))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(SweepReport { mode: "sweep".into(), seed, reps, observer: config.observer.preset.clone(), rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut s = String::from(
        "ratio,exponent,runs,capped,asymptote_mm,converged_percentile,oracle_percentile,one_site_jnd_mm,two_site_jnd_mm,two_site_lower_fraction\n",
    );
    for r in &report.rows {
        s += &format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.ratio,
            r.exponent,
            r.runs,
            r.capped,
            opt(r.asymptote_mm),
            opt(r.converged_percentile),
            opt(r.oracle_percentile),
            r.one_site_jnd_mm.mean,
            r.two_site_jnd_mm.mean,
            r.two_site_lower_fraction
        );
    }
    s
}

pub fn write_sweep(report: &SweepReport, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("sweep.csv"), sweep_csv(report))?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn table(report: &SweepReport) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut t = format!(
        "{:>7} {:>8} {:>6} {:>10} {:>8} {:>8} {:>9} {:>9} {:>8}\n",
        "ratio", "exponent", "runs", "asym (mm)", "p_conv", "p_oracle", "jnd1 (mm)", "jnd2 (mm)", "2<1"
    );
    for r in &report.rows {
        t += &format!(
            "{:>7} {:>8} {:>6} {:>10} {:>8} {:>8} {:>9.3} {:>9.3} {:>7.1}%\n",
            r.ratio,
            r.exponent,
            r.runs,
            f(r.asymptote_mm),
            f(r.converged_percentile),
            f(r.oracle_percentile),
            r.one_site_jnd_mm.mean,
            r.two_site_jnd_mm.mean,
            100.0 * r.two_site_lower_fraction
        );
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_grid_gives_single_row() {
        let config = ExperimentConfig::default();
        let grid = Grid::parse("ratio=1.0", &config).unwrap();
        let report = sweep(&config, &grid, 3, 8).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(sweep_csv(&report).lines().count(), 2);
        assert_eq!(report.rows[0].capped, 0);
    }

    #[test]
    fn cells_are_deterministic() {
        let config = ExperimentConfig::default();
        let a = sweep_cell(&config, 0.7393, Summation::FULL, 9, 6).unwrap();
        let b = sweep_cell(&config, 0.7393, Summation::FULL, 9, 6).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
