use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use hapsy_cli::manifest::load_config;
use hapsy_cli::{run, Grid, Mode, RunManifest};

/// Simulated pressure-discrimination experiments and the session server.
#[derive(Debug, Parser)]
#[command(name = "hapsy", version)]
struct Args {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Repetitions (simulate) or runs per grid cell (sweep).
    #[arg(long, default_value_t = 1)]
    reps: u64,
    /// Base seed; overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Required except for replay; the session store
    /// root for serve.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep grid, e.g. "ratio=0.6,0.7393,1.0;exponent=1,2,max".
    #[arg(long)]
    grid: Option<String>,
    /// Session log to verify (replay).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Listen address (serve).
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

fn manifest(args: Args) -> anyhow::Result<RunManifest> {
    let config = load_config(args.config.as_deref())?;
    let grid = args.grid.as_deref().map(|g| Grid::parse(g, &config)).transpose()?;
    let mut m = RunManifest::new(args.mode, config);
    m.config_path = args.config;
    m.seed = args.seed.unwrap_or(m.config.seed);
    m.reps = args.reps;
    m.out = args.out;
    m.grid = grid;
    m.log = args.log;
    m.addr = args.addr;
    Ok(m)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info,hapsy_core=error")).init();
    let result = manifest(Args::parse()).and_then(|m| run(&m, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
