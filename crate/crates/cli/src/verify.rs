//! Replay verification of a session log.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use hapsy_session::{replay_log, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub mode: String,
    pub log: String,
    pub session_id: String,
    pub seed: u64,
    pub bytes: usize,
    pub events: u64,
    pub phase: Phase,
    pub one_site_mm: Option<f64>,
    pub two_site_mm: Option<f64>,
    pub kendall_tau_b: Option<f64>,
}

/// Replays `log`, failing with the byte offset of the last valid record if
/// it does not reproduce. With `out`, the regenerated exports are written
/// there.
pub fn verify(log: &Path, out: Option<&Path>) -> anyhow::Result<ReplayReport> {
    let bytes = fs::read(log).with_context(|| format!("reading {}", log.display()))?;
    let replayed = replay_log(&bytes)
        .map_err(|e| anyhow::anyhow!("{}: {e} (last valid byte offset {})", log.display(), e.last_valid_offset()))?;
    let summary = replayed.engine.summary();
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        for (name, body) in replayed.engine.exports().files() {
            fs::write(out.join(name), body)?;
        }
    }
    Ok(ReplayReport {
        mode: "replay".into(),
        log: log.display().to_string(),
        session_id: replayed.header.session_id.clone(),
        seed: replayed.header.seed,
        bytes: replayed.valid_len,
        events: replayed.next_seq,
        phase: summary.phase,
        one_site_mm: summary.one_site.map(|e| e.converged_level_mm),
        two_site_mm: summary.two_site.map(|e| e.converged_level_mm),
        kendall_tau_b: summary.ordering_metrics.map(|m| m.kendall_tau_b),
    })
}

pub fn table(r: &ReplayReport) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "log          {}\nsession      {}\nseed         {}\nevents       {}\nphase        {}\none-site mm  {}\ntwo-site mm  {}\ntau_b        {}\nreplay       ok\n",
        r.log,
        r.session_id,
        r.seed,
        r.events,
        r.phase,
        f(r.one_site_mm),
        f(r.two_site_mm),
        f(r.kendall_tau_b)
    )
}
