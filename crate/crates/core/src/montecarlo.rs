//! Seeded batches of simulated runs.
//!
//! With the `parallel` feature (default) batches run on the rayon pool;
//! without it they run sequentially. Results always come back in index
//! order, and each item depends only on its own seed, so both paths give
//! identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::observer::{ComparisonResponder, Observer, ObserverError, ObserverParams};
use crate::rng::{derive_seed, STREAM_OBSERVER, STREAM_SCHEDULE};
use crate::staircase::{
    balanced_reversal_mean, JndEstimate, Psychometric, Staircase, StaircaseConfig, StaircaseError, StaircaseState,
    TRANSIENT_REVERSALS,
};
use crate::stimulus::AsrResult;

pub fn run_batch_sequential<T, F>(n: u64, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn run_batch_parallel<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Run `f(0..n)` on the configured backend, in index order.
pub fn run_batch<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        run_batch_parallel(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_batch_sequential(n, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedStaircase {
    pub state: StaircaseState,
    /// `None` when the trial cap was hit first.
    pub estimate: Option<JndEstimate>,
    pub trials: u64,
}

impl SimulatedStaircase {
    pub fn terminated(&self) -> bool {
        self.state.complete
    }
}

/// Run one staircase against `responder` until it completes or `trial_cap`
/// presentations have been made.
pub fn simulate_staircase(
    config: StaircaseConfig,
    asr: AsrResult,
    responder: &mut dyn ComparisonResponder,
    schedule_seed: u64,
    trial_cap: u64,
) -> Result<SimulatedStaircase, StaircaseError> {
    let mut staircase = Staircase::new(config, asr, schedule_seed)?;
    while !staircase.is_complete() && staircase.state().presentations < trial_cap {
        let p = staircase.next_trial()?;
        let response = responder.compare(&p.pair.first, &p.pair.second);
        staircase.submit(response)?;
    }
    let estimate = staircase.is_complete().then(|| staircase.estimate_jnd()).transpose()?;
    let trials = staircase.state().presentations;
    Ok(SimulatedStaircase { state: staircase.state().clone(), estimate, trials })
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Staircase(#[from] StaircaseError),
}

/// One staircase with a fresh simulated observer, all randomness from `seed`.
pub fn simulate_observer_staircase(
    config: StaircaseConfig,
    asr: AsrResult,
    params: &ObserverParams,
    seed: u64,
    trial_cap: u64,
) -> Result<SimulatedStaircase, SimError> {
    let mut observer = Observer::new(params.clone(), derive_seed(seed, STREAM_OBSERVER))?;
    Ok(simulate_staircase(config, asr, &mut observer, derive_seed(seed, STREAM_SCHEDULE), trial_cap)?)
}

/// Psychometric value at the mean asymptotic level of a set of runs. Each
/// run contributes its balanced reversal mean after the transient.
pub fn converged_percentile(runs: &[SimulatedStaircase], psychometric: &dyn Psychometric) -> Option<(f64, f64)> {
    let levels: Vec<f64> =
        runs.iter().filter_map(|r| balanced_reversal_mean(&r.state.reversal_levels_mm, TRANSIENT_REVERSALS)).collect();
    if levels.is_empty() {
        return None;
    }
    let mean = summarize(&levels).mean;
    Some((mean, psychometric.p_correct(mean)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample sd (n - 1); 0 for fewer than two values.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Order-independent summary: values are sorted before summation, so any
/// permutation of the input gives bit-identical output.
pub fn summarize(values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, sd: f64::NAN, min: f64::NAN, max: f64::NAN };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Summary { n, mean, sd, min: v[0], max: v[n - 1] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimulus::{ChannelId, ChannelSet};

    fn setup() -> (StaircaseConfig, AsrResult) {
        let asr = AsrResult::new(4.0, 16.8).unwrap();
        (StaircaseConfig::for_asr(&asr, ChannelSet::single(ChannelId::new(0).unwrap())), asr)
    }

    #[test]
    fn sequential_and_batch_agree() {
        let f = |i: u64| i * i + 1;
        assert_eq!(run_batch(100, f), run_batch_sequential(100, f));
    }

    #[test]
    fn simulated_run_completes_and_is_reproducible() {
        let (c, asr) = setup();
        let p = ObserverParams::paper_like();
        let a = simulate_observer_staircase(c.clone(), asr, &p, 7, 10_000).unwrap();
        let b = simulate_observer_staircase(c, asr, &p, 7, 10_000).unwrap();
        assert!(a.terminated());
        assert_eq!(a, b);
        assert_eq!(a.state.reversal_levels_mm.len(), 16);
    }

    #[test]
    fn trial_cap_stops_run() {
        let (c, asr) = setup();
        let r = simulate_observer_staircase(c, asr, &ObserverParams::paper_like(), 7, 5).unwrap();
        assert_eq!(r.trials, 5);
        assert!(r.estimate.is_none());
    }

    #[test]
    fn summary_is_permutation_invariant() {
        let v = [0.1, 0.7, 1e-9, 3.3, 2.2, 0.30000000000000004];
        let mut w = v;
        w.reverse();
        assert_eq!(summarize(&v), summarize(&w));
        assert_eq!(summarize(&[2.0]).sd, 0.0);
    }
}
