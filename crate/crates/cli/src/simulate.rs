//! Batches of fully simulated sessions.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use hapsy_core::montecarlo::{run_batch, summarize, Summary};
use hapsy_core::rng::indexed_seed;
use hapsy_core::ExperimentConfig;
use hapsy_session::{simulate_session, Phase, SimulatedSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub rep: u64,
    pub seed: u64,
    pub phase: Phase,
    pub one_site_mm: Option<f64>,
    pub two_site_mm: Option<f64>,
    pub one_site_jnd_mm: Option<f64>,
    pub two_site_jnd_mm: Option<f64>,
    pub one_site_reversals: usize,
    pub two_site_reversals: usize,
    pub kendall_tau_b: Option<f64>,
    pub endpoints_correct: Option<bool>,
}

impl RunResult {
    pub fn from_session(rep: u64, seed: u64, s: &SimulatedSession) -> Self {
        let summary = &s.summary;
        let reversals = |csv: &str| csv.lines().skip(1).filter(|l| l.ends_with(",true")).count();
        Self {
            rep,
            seed,
            phase: summary.phase,
            one_site_mm: summary.one_site.as_ref().map(|e| e.converged_level_mm),
            two_site_mm: summary.two_site.as_ref().map(|e| e.converged_level_mm),
            one_site_jnd_mm: summary.one_site.as_ref().map(|e| e.jnd_delta_mm),
            two_site_jnd_mm: summary.two_site.as_ref().map(|e| e.jnd_delta_mm),
            one_site_reversals: reversals(&s.exports.one_site_trace_csv),
            two_site_reversals: reversals(&s.exports.two_site_trace_csv),
            kendall_tau_b: summary.ordering_metrics.map(|m| m.kendall_tau_b),
            endpoints_correct: summary.ordering_metrics.map(|m| m.endpoints_correct),
        }
    }

    /// Two-site level below one-site level within this session.
    pub fn two_site_lower(&self) -> Option<bool> {
        Some(self.two_site_mm? < self.one_site_mm?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub reps: usize,
    pub completed: usize,
    pub one_site_mm: Summary,
    pub two_site_mm: Summary,
    pub one_site_jnd_mm: Summary,
    pub two_site_jnd_mm: Summary,
    /// Sessions with both staircases finished.
    pub paired: usize,
    pub two_site_lower: usize,
    pub two_site_lower_fraction: f64,
    pub endpoints_correct: usize,
    pub tau_b_one: usize,
    pub kendall_tau_b: Summary,
}

/// Order-independent: counts and sorted summaries only.
pub fn aggregate(runs: &[RunResult]) -> Aggregate {
    let col = |f: fn(&RunResult) -> Option<f64>| summarize(&runs.iter().filter_map(f).collect::<Vec<_>>());
    let paired = runs.iter().filter_map(RunResult::two_site_lower).count();
    let lower = runs.iter().filter(|r| r.two_site_lower() == Some(true)).count();
    Aggregate {
        reps: runs.len(),
        completed: runs.iter().filter(|r| r.phase == Phase::Done).count(),
        one_site_mm: col(|r| r.one_site_mm),
        two_site_mm: col(|r| r.two_site_mm),
        one_site_jnd_mm: col(|r| r.one_site_jnd_mm),
        two_site_jnd_mm: col(|r| r.two_site_jnd_mm),
        paired,
        two_site_lower: lower,
        two_site_lower_fraction: if paired > 0 { lower as f64 / paired as f64 } else { f64::NAN },
        endpoints_correct: runs.iter().filter(|r| r.endpoints_correct == Some(true)).count(),
        tau_b_one: runs.iter().filter(|r| r.kendall_tau_b == Some(1.0)).count(),
        kendall_tau_b: col(|r| r.kendall_tau_b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub mode: String,
    pub seed: u64,
    pub reps: u64,
    pub observer: String,
    pub aggregate: Aggregate,
    pub runs: Vec<RunResult>,
}

/// Seed of repetition `rep`.
pub fn rep_seed(seed: u64, rep: u64) -> u64 {
    indexed_seed(seed, rep)
}

fn write_run(dir: &Path, session: &SimulatedSession) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in session.exports.files() {
        fs::write(dir.join(name), body)?;
    }
    fs::write(dir.join("session.ndjson"), &session.log)?;
    Ok(())
}

pub fn run_dir(out: &Path, rep: u64) -> std::path::PathBuf {
    out.join("runs").join(format!("{rep:04}"))
}

/// Run `reps` seeded sessions, in parallel when enabled. With `out`, each
/// run's exports and log land in `out/runs/NNNN/`.
pub fn simulate_runs(
    config: &ExperimentConfig,
    seed: u64,
    reps: u64,
    out: Option<&Path>,
) -> anyhow::Result<Vec<RunResult>> {
    run_batch(reps, |rep| {
        let s = rep_seed(seed, rep);
        let session = simulate_session(config, s).with_context(|| format!("repetition {rep} (seed {s})"))?;
        if let Some(out) = out {
            write_run(&run_dir(out, rep), &session).with_context(|| format!("writing repetition {rep}"))?;
        }
        Ok(RunResult::from_session(rep, s, &session))
    })
    .into_iter()
    .collect()
}

pub fn runs_csv(runs: &[RunResult]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(
        "rep,seed,phase,one_site_mm,two_site_mm,one_site_jnd_mm,two_site_jnd_mm,kendall_tau_b,endpoints_correct\n",
    );
    for r in runs {
        s += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.rep,
            r.seed,
            r.phase,
            opt(r.one_site_mm),
            opt(r.two_site_mm),
            opt(r.one_site_jnd_mm),
            opt(r.two_site_jnd_mm),
            opt(r.kendall_tau_b),
            r.endpoints_correct.map(|b| b.to_string()).unwrap_or_default()
        );
    }
    s
}

pub fn simulate(config: &ExperimentConfig, seed: u64, reps: u64, out: &Path) -> anyhow::Result<SimulationReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let runs = simulate_runs(config, seed, reps, Some(out))?;
    let report = SimulationReport {
        mode: "simulate".into(),
        seed,
        reps,
        observer: config.observer.preset.clone(),
        aggregate: aggregate(&runs),
        runs,
    };
    fs::write(out.join("runs.csv"), runs_csv(&report.runs))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    Ok(report)
}

pub fn table(report: &SimulationReport) -> String {
    let a = &report.aggregate;
    let row = |name: &str, s: &Summary| {
        format!("{name:<22} {:>4} {:>9.3} {:>8.3} {:>8.3} {:>8.3}\n", s.n, s.mean, s.sd, s.min, s.max)
    };
    let mut t = format!("{:<22} {:>4} {:>9} {:>8} {:>8} {:>8}\n", "measure", "n", "mean", "sd", "min", "max");
    t += &row("one-site level (mm)", &a.one_site_mm);
    t += &row("two-site level (mm)", &a.two_site_mm);
    t += &row("one-site JND (mm)", &a.one_site_jnd_mm);
    t += &row("two-site JND (mm)", &a.two_site_jnd_mm);
    t += &row("ordering tau_b", &a.kendall_tau_b);
    t += &format!(
        "two-site < one-site: {}/{} ({:.1}%)\n",
        a.two_site_lower,
        a.paired,
        100.0 * a.two_site_lower_fraction
    );
    t += &format!("ordering endpoints correct: {}/{}\n", a.endpoints_correct, a.reps);
    t += &format!("sessions completed: {}/{}\n", a.completed, a.reps);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(rep: u64, one: f64, two: f64, tau: f64) -> RunResult {
        RunResult {
            rep,
            seed: rep,
            phase: Phase::Done,
            one_site_mm: Some(one),
            two_site_mm: Some(two),
            one_site_jnd_mm: Some(one - 10.4),
            two_site_jnd_mm: Some(two - 10.4),
            one_site_reversals: 16,
            two_site_reversals: 16,
            kendall_tau_b: Some(tau),
            endpoints_correct: Some(true),
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut runs: Vec<RunResult> = (0..50)
            .map(|i| run(i, 12.0 + 0.013 * i as f64, 11.0 + 0.029 * (i % 7) as f64, 1.0 - 0.01 * (i % 3) as f64))
            .collect();
        let a = aggregate(&runs);
        runs.reverse();
        runs.swap(3, 17);
        runs.rotate_left(11);
        let b = aggregate(&runs);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.two_site_lower, 50);
    }

    #[test]
    fn csv_has_one_row_per_run() {
        let runs = vec![run(0, 12.0, 11.0, 1.0), run(1, 11.0, 12.0, 0.9)];
        let csv = runs_csv(&runs);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,DONE,12,11,"));
    }
}
