//! Markov-chain equilibrium of the 2-down/1-up staircase.
//!
//! Sampled at move epochs (the counter is always zero right after a move),
//! the staircase is a random walk on levels: from `x` it steps down by
//! `step_down` with probability `q(x) = p(x)^2` and up by `step_up`
//! otherwise, clamped to the ASR. The chain is solved on a fine lattice by
//! Cesàro-averaged power iteration. Reversal flux gives the stationary mean
//! peak and valley levels; their midpoint is the asymptotic level and the
//! psychometric value there is the equilibrium percentile.
//!
//! This module does not share code with the trial-by-trial engine in the
//! parent module; it serves as its independent oracle.

use serde::{Deserialize, Serialize};

/// Probability of a correct response as a function of the comparison level.
pub trait Psychometric {
    fn p_correct(&self, comparison_mm: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Psychometric for F {
    fn p_correct(&self, comparison_mm: f64) -> f64 {
        self(comparison_mm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSettings {
    pub lower_mm: f64,
    pub upper_mm: f64,
    pub step_up_mm: f64,
    /// Lattice points per `step_up`.
    pub lattice_per_step: u32,
    pub min_iterations: u32,
    pub max_iterations: u32,
    /// Convergence threshold on the asymptotic level between checks.
    pub tolerance_mm: f64,
    /// Stationary mass allowed on the two rails before the chain counts as
    /// not converged.
    pub max_rail_mass: f64,
}

impl EquilibriumSettings {
    pub fn new(lower_mm: f64, upper_mm: f64, step_up_mm: f64) -> Self {
        Self {
            lower_mm,
            upper_mm,
            step_up_mm,
            lattice_per_step: 400,
            min_iterations: 2_000,
            max_iterations: 100_000,
            tolerance_mm: 1e-7,
            max_rail_mass: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub converged: bool,
    /// Midpoint of the stationary mean peak and valley levels.
    pub level_mm: Option<f64>,
    /// `p_correct` at `level_mm`.
    pub percentile: Option<f64>,
    pub peak_mean_mm: f64,
    pub valley_mean_mm: f64,
    pub rail_mass: f64,
    pub iterations: u32,
}

struct Chain {
    n: usize,
    up: usize,
    down_lo: usize,
    down_frac: f64,
    q: Vec<f64>,
    x: Vec<f64>,
}

impl Chain {
    fn up_target(&self, i: usize) -> usize {
        (i + self.up).min(self.n - 1)
    }

    // Down move of a non-integer number of lattice units, split between the
    // two neighbouring lattice points so the mean displacement is exact.
    fn down_targets(&self, i: usize) -> [(usize, f64); 2] {
        [(i.saturating_sub(self.down_lo), 1.0 - self.down_frac), (i.saturating_sub(self.down_lo + 1), self.down_frac)]
    }

    fn step(&self, from: &[f64], to: &mut [f64]) {
        to.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let m = from[i];
            if m == 0.0 {
                continue;
            }
            let q = self.q[i];
            to[self.up_target(i)] += m * (1.0 - q);
            for (j, w) in self.down_targets(i) {
                to[j] += m * q * w;
            }
        }
    }

    /// Mean peak and valley levels under the distribution `pi`.
    fn reversal_means(&self, pi: &[f64]) -> (f64, f64) {
        let mut arrive_up = vec![0.0; self.n];
        let mut arrive_down = vec![0.0; self.n];
        for i in 0..self.n {
            let q = self.q[i];
            arrive_up[self.up_target(i)] += pi[i] * (1.0 - q);
            for (j, w) in self.down_targets(i) {
                arrive_down[j] += pi[i] * q * w;
            }
        }
        let (mut pw, mut px, mut vw, mut vx) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..self.n {
            let peak = arrive_up[i] * self.q[i];
            let valley = arrive_down[i] * (1.0 - self.q[i]);
            pw += peak;
            px += peak * self.x[i];
            vw += valley;
            vx += valley * self.x[i];
        }
        (px / pw, vx / vw)
    }
}

/// Equilibrium percentile of a 2-down/1-up staircase with
/// `step_down = ratio * step_up` under `psychometric`.
pub fn equilibrium_percentile(
    ratio: f64,
    psychometric: &dyn Psychometric,
    settings: &EquilibriumSettings,
) -> Equilibrium {
    assert!(ratio.is_finite() && ratio > 0.0, "ratio must be positive");
    let res = settings.lattice_per_step.max(1) as usize;
    let h = settings.step_up_mm / res as f64;
    let span = settings.upper_mm - settings.lower_mm;
    let n = (span / h + 1e-9).floor() as usize + 1;
    let x: Vec<f64> = (0..n).map(|i| settings.lower_mm + i as f64 * h).collect();
    let q: Vec<f64> = x
        .iter()
        .map(|&v| {
            let p = psychometric.p_correct(v).clamp(0.0, 1.0);
            p * p
        })
        .collect();
    let down_units = ratio * res as f64;
    let chain =
        Chain { n, up: res, down_lo: down_units.floor() as usize, down_frac: down_units - down_units.floor(), q, x };

    // Zero-drift point must lie inside the range: the walk has to be pushed
    // up at the lower rail and down at the upper rail.
    let drift = |i: usize| (1.0 - chain.q[i]) * settings.step_up_mm - chain.q[i] * ratio * settings.step_up_mm;
    let bracketed = drift(0) > 0.0 && drift(n - 1) < 0.0;

    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut avg = vec![0.0; n];
    let mut averaged = 0u64;
    let block = 500u32;
    let mut iterations = 0u32;
    let mut last_level = f64::NAN;
    let mut level = f64::NAN;
    let (mut peak, mut valley) = (f64::NAN, f64::NAN);
    while iterations < settings.max_iterations {
        for _ in 0..block {
            chain.step(&pi, &mut next);
            std::mem::swap(&mut pi, &mut next);
            iterations += 1;
            if iterations > settings.min_iterations / 2 {
                avg.iter_mut().zip(&pi).for_each(|(a, p)| *a += p);
                averaged += 1;
            }
        }
        if averaged == 0 {
            continue;
        }
        let norm: Vec<f64> = avg.iter().map(|a| a / averaged as f64).collect();
        (peak, valley) = chain.reversal_means(&norm);
        level = 0.5 * (peak + valley);
        if iterations >= settings.min_iterations && (level - last_level).abs() < settings.tolerance_mm {
            break;
        }
        last_level = level;
    }
    let total: f64 = avg.iter().sum();
    let rail_mass = if total > 0.0 { (avg[0] + avg[n - 1]) / total } else { 1.0 };
    let converged = bracketed && rail_mass <= settings.max_rail_mass && level.is_finite();
    Equilibrium {
        converged,
        level_mm: converged.then_some(level),
        percentile: converged.then(|| psychometric.p_correct(level)),
        peak_mean_mm: peak,
        valley_mean_mm: valley,
        rail_mass,
        iterations,
    }
}
