//! Batch front end: simulated experiments, parameter sweeps, log replay
//! checks and the session server.
//!
//! Reports go to stdout as one line of JSON followed by a plain-text table.

pub mod manifest;
pub mod simulate;
pub mod sweep;
pub mod verify;

use std::io::Write;
use std::sync::Arc;

use anyhow::Context;
use serde::Serialize;

pub use manifest::{Grid, ManifestError, Mode, RunManifest};

fn report<T: Serialize>(out: &mut dyn Write, value: &T, table: String) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    writeln!(out)?;
    write!(out, "{table}")?;
    Ok(())
}

/// Run the manifest, writing reports to `out`.
pub fn run(m: &RunManifest, out: &mut dyn Write) -> anyhow::Result<()> {
    m.validate()?;
    match m.mode {
        Mode::Simulate => {
            let dir = m.out.as_deref().expect("validated");
            let r = simulate::simulate(&m.config, m.seed, m.reps, dir)?;
            report(out, &r, simulate::table(&r))
        }
        Mode::Sweep => {
            let dir = m.out.as_deref().expect("validated");
            let grid = m.grid.as_ref().expect("validated");
            let r = sweep::sweep(&m.config, grid, m.seed, m.reps)?;
            sweep::write_sweep(&r, dir)?;
            report(out, &r, sweep::table(&r))
        }
        Mode::Replay => {
            let r = verify::verify(m.log.as_deref().expect("validated"), m.out.as_deref())?;
            report(out, &r, verify::table(&r))
        }
        Mode::Serve => {
            let dir = m.out.as_deref().expect("validated");
            let store = hapsy_session::SessionStore::open(dir, true)
                .with_context(|| format!("opening store {}", dir.display()))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(hapsy_session::api::serve(Arc::new(store), m.addr))?;
            Ok(())
        }
    }
}
