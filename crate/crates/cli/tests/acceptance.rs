//! Acceptance criteria, each at its fixed tolerance. Prints one PASS/FAIL
//! line per criterion and fails if any criterion fails.
//!
//! Run with `cargo test -p hapsy-cli --test acceptance -- --nocapture`.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use hapsy_cli::simulate::{aggregate, rep_seed, simulate_runs};
use hapsy_cli::sweep::sweep_cell;
use hapsy_core::device::{
    decode_frame, encode_frame, AckData, Command, DeviceParams, Frame, NakCode, PressureDevice, SimDevice,
};
use hapsy_core::montecarlo::{run_batch, simulate_observer_staircase};
use hapsy_core::observer::{ObserverParams, Summation};
use hapsy_core::rng::indexed_seed;
use hapsy_core::staircase::{Direction, EqualPolicy};
use hapsy_core::{AsrResult, ChannelId, ChannelSet, ExperimentConfig, StaircaseConfig};
use hapsy_session::log::{CrashingSink, LogSink, MemorySink};
use hapsy_session::{
    recover_log, replay_log, simulate_session, EventBody, LogEvent, Session, SessionError, SimulatedSession,
};

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn non_summing() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.observer.preset = "non-summing".into();
    c
}

fn staircase_equilibrium() -> Outcome {
    let start = Instant::now();
    let row = sweep_cell(&ExperimentConfig::default(), 0.7393, Summation::FULL, SEED, 500).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (Some(p), Some(oracle)) = (row.converged_percentile, row.oracle_percentile) else {
        return outcome(false, "no converged runs or oracle did not converge");
    };
    let diff = (p - oracle).abs();
    outcome(
        diff <= 0.03 && secs < 30.0 && row.capped == 0,
        format!(
            "p(correct) {p:.4} vs oracle {oracle:.4} (|diff| {diff:.4} <= 0.03), {secs:.1} s < 30 s, {} capped",
            row.capped
        ),
    )
}

fn classic_ratio() -> Outcome {
    let row = sweep_cell(&ExperimentConfig::default(), 1.0, Summation::FULL, SEED + 1, 1000).unwrap();
    let p = row.converged_percentile.unwrap_or(f64::NAN);
    outcome(
        (p - 0.707).abs() <= 0.02,
        format!(
            "converged percentile {p:.4} (0.707 +/- 0.02), oracle {:.4}",
            row.oracle_percentile.unwrap_or(f64::NAN)
        ),
    )
}

fn spatial_summation() -> Outcome {
    let summing = aggregate(&simulate_runs(&ExperimentConfig::default(), SEED + 2, 200, None).unwrap());
    let max = aggregate(&simulate_runs(&non_summing(), SEED + 2, 200, None).unwrap());
    let pass = summing.paired == 200
        && max.paired == 200
        && summing.two_site_lower_fraction >= 0.95
        && max.two_site_lower_fraction <= 0.55;
    outcome(
        pass,
        format!(
            "exponent 1: two-site lower in {}/{} (>= 95%); max: {}/{} (<= 55%)",
            summing.two_site_lower, summing.paired, max.two_site_lower, max.paired
        ),
    )
}

fn jnd_oracle() -> Outcome {
    let asr = AsrResult::new(4.0, 16.8).unwrap();
    let presets = [ObserverParams::paper_like(), ObserverParams::summing(), ObserverParams::non_summing()];
    let results = run_batch(1000, |i| {
        let seed = indexed_seed(SEED + 3, i);
        let mut rng = StdRng::seed_from_u64(seed);
        let set = if rng.random_bool(0.5) {
            ChannelSet::single(ChannelId::new(0).unwrap())
        } else {
            ChannelSet::from_indices(&[0, 1]).unwrap()
        };
        let mut c = StaircaseConfig::for_asr(&asr, set);
        c.step_ratio_down_over_up = rng.random_range(0.3..=1.0);
        c.step_up_mm = rng.random_range(0.25..=1.5);
        c.n_reversals_to_stop = rng.random_range(4..=20);
        c.n_reversals_for_estimate = rng.random_range(1..=c.n_reversals_to_stop.min(8));
        c.equal_counts_as = if rng.random_bool(0.5) { EqualPolicy::Incorrect } else { EqualPolicy::Ignore };
        let params = &presets[rng.random_range(0..presets.len())];
        let run = simulate_observer_staircase(c.clone(), asr, params, seed, 100_000).unwrap();
        let Some(e) = run.estimate else { return Err(format!("run {i} did not complete")) };
        // Recompute from the trial log alone.
        let reversals: Vec<f64> = run.state.trial_log.iter().filter(|t| t.reversal).map(|t| t.comparison_mm).collect();
        let last = &reversals[reversals.len() - c.n_reversals_for_estimate..];
        let n = last.len() as f64;
        let mut sum = 0.0;
        for x in last {
            sum += x;
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for x in last {
            ss += (x - mean) * (x - mean);
        }
        let sd = if last.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        let same = e.converged_level_mm == mean
            && e.converged_level_sd_mm == sd
            && e.jnd_delta_mm == mean - c.reference_mm
            && e.n_reversals_used == last.len()
            && reversals.len() == c.n_reversals_to_stop;
        if same {
            Ok(())
        } else {
            Err(format!("run {i}: {e:?} vs mean {mean} sd {sd}"))
        }
    });
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    outcome(
        failures.is_empty(),
        format!(
            "{}/1000 exact matches{}",
            1000 - failures.len(),
            failures.first().map(|f| format!("; first mismatch {f}")).unwrap_or_default()
        ),
    )
}

fn device_anchor() -> Outcome {
    let params = DeviceParams::default();
    let step = params.sensor.resolution_n;
    let mut d = SimDevice::new(params, SEED).unwrap();
    let ch = ChannelId::new(0).unwrap();
    let mut monotone = true;
    let mut last = f64::NEG_INFINITY;
    for i in 0..=80 {
        let target = 0.25 * f64::from(i);
        d.set_target(ch, target).unwrap();
        d.wait_ms(2000).unwrap();
        let f = d.clean_force_n(ch).unwrap();
        monotone &= f >= last;
        last = f;
    }
    d.set_target(ch, 10.4).unwrap();
    d.wait_ms(3000).unwrap();
    let f = d.clean_force_n(ch).unwrap();
    let mean = (0..2000).map(|_| d.read_force(ch).unwrap().force_n).sum::<f64>() / 2000.0;
    let pass = monotone && (f - 4.3).abs() <= step + 1e-12 && (mean - 4.3).abs() <= step;
    outcome(pass, format!("steady force at 10.4 mm {f:.3} N, noisy mean {mean:.3} N (4.3 +/- {step}); monotone over 0-20 mm: {monotone}"))
}

fn random_command(rng: &mut StdRng) -> Command {
    let nak =
        [NakCode::UnknownChannel, NakCode::InvalidValue, NakCode::Busy, NakCode::CalibrationFailed, NakCode::BadFrame];
    match rng.random_range(0..11) {
        0 => Command::SetTarget { centi_mm: rng.random() },
        1 => Command::GetPos,
        2 => Command::GetForce,
        3 => Command::SetGains { kp_centi: rng.random(), kd_centi: rng.random() },
        4 => Command::Calibrate,
        5 => Command::Ack(AckData::SetTarget),
        6 => Command::Ack(AckData::SetGains),
        7 => Command::Ack(AckData::Position { centi_mm: rng.random() }),
        8 => Command::Ack(AckData::Force { centi_n: rng.random() }),
        9 => Command::Ack(AckData::Calibrate { stiffness_e4: rng.random(), offset_centi_mm: rng.random() }),
        _ => Command::Nak { opcode: rng.random(), code: nak[rng.random_range(0..nak.len())] },
    }
}

fn protocol() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED + 4);
    let frames: Vec<Frame> =
        (0..10_000).map(|_| Frame { channel: rng.random(), command: random_command(&mut rng) }).collect();
    let round_trips = frames.iter().filter(|f| decode_frame(&encode_frame(f)).as_ref() == Ok(*f)).count();
    // Exhaustive corruption of every byte position of the first 500 frames.
    let mut worst = 1.0f64;
    for f in &frames[..500] {
        let good = encode_frame(f);
        for pos in 0..good.len() {
            let rejected = (0..=255u8)
                .filter(|&b| b != good[pos])
                .filter(|&b| {
                    let mut bad = good.clone();
                    bad[pos] = b;
                    decode_frame(&bad).is_err()
                })
                .count();
            worst = worst.min(rejected as f64 / 255.0);
        }
    }
    outcome(
        round_trips == 10_000 && worst >= 255.0 / 256.0,
        format!(
            "{round_trips}/10000 round trips; worst position rejects {:.2}% of corruptions (>= 99.61%)",
            100.0 * worst
        ),
    )
}

fn crash_run(live: &SimulatedSession, seed: u64, budget: usize) -> Option<(String, usize, Vec<u8>)> {
    let mem = MemorySink::new();
    let sink = CrashingSink { inner: mem.clone(), budget };
    let (mut session, _) = Session::create(&live.session_id, ExperimentConfig::default(), seed, Box::new(sink)).ok()?;
    for (i, sub) in live.submissions.iter().enumerate() {
        match session.submit(sub) {
            Ok(_) => {}
            Err(SessionError::Log(_)) => return Some((session.engine().checkpoint(), i, mem.contents())),
            Err(e) => panic!("{e}"),
        }
    }
    None
}

fn replay_determinism(sessions: &[(u64, SimulatedSession)]) -> Outcome {
    let mut bad = Vec::new();
    for (seed, s) in sessions {
        let r = replay_log(&s.log).unwrap();
        let summary = r.engine.summary();
        let bits = |e: Option<&hapsy_core::JndEstimate>| {
            e.map(|e| (e.converged_level_mm.to_bits(), e.converged_level_sd_mm.to_bits(), e.jnd_delta_mm.to_bits()))
        };
        let same = bits(summary.one_site.as_ref()) == bits(s.summary.one_site.as_ref())
            && bits(summary.two_site.as_ref()) == bits(s.summary.two_site.as_ref())
            && summary.ordering_metrics.map(|m| m.kendall_tau_b.to_bits())
                == s.summary.ordering_metrics.map(|m| m.kendall_tau_b.to_bits())
            && r.engine.exports() == s.exports;
        if !same {
            bad.push(format!("seed {seed}: replay differs"));
        }
    }
    let mut crashes = 0;
    for (seed, s) in &sessions[..4] {
        let opening: usize = s.log.split_inclusive(|&b| b == b'\n').take(4).map(<[u8]>::len).sum();
        for k in 0..16 {
            let budget = opening + (s.log.len() - opening) * k / 16 + 13 * k;
            let Some((at_crash, failed, written)) = crash_run(s, *seed, budget) else { continue };
            crashes += 1;
            let recovered = recover_log(&written).unwrap();
            if recovered.engine.checkpoint() != at_crash {
                bad.push(format!("seed {seed} budget {budget}: recovered state differs from state at crash"));
                continue;
            }
            let mem = MemorySink::new();
            let mut prefix = mem.clone();
            prefix.append(&written[..recovered.valid_len]).unwrap();
            let mut session = Session::resume(recovered, Box::new(mem.clone()));
            for sub in &s.submissions[failed..] {
                session.submit(sub).unwrap();
            }
            if session.engine().exports() != s.exports || mem.contents() != s.log {
                bad.push(format!("seed {seed} budget {budget}: resumed run diverges"));
            }
        }
    }
    outcome(
        bad.is_empty() && crashes >= 40,
        format!(
            "{} sessions replayed bit-identically, {crashes} injected crashes recovered; {}",
            sessions.len(),
            bad.first().cloned().unwrap_or_else(|| "no divergence".into())
        ),
    )
}

fn ordering_task(sessions: &[(u64, SimulatedSession)]) -> Outcome {
    let good = sessions
        .iter()
        .filter(|(_, s)| s.summary.ordering_metrics.is_some_and(|m| m.endpoints_correct && m.kendall_tau_b == 1.0))
        .count();
    outcome(
        good == 100 && sessions.len() == 100,
        format!("{good}/{} sessions with endpoints correct and tau_b = 1.0", sessions.len()),
    )
}

fn trace_export(sessions: &[(u64, SimulatedSession)]) -> Outcome {
    let config = ExperimentConfig::default();
    let up = config.staircase.step_up_mm;
    let down = up * config.staircase.step_ratio_down_over_up;
    let mut problems = Vec::new();
    let mut steps = 0;
    for (seed, s) in sessions {
        for csv in [&s.exports.one_site_trace_csv, &s.exports.two_site_trace_csv] {
            let reversals = csv.lines().skip(1).filter(|l| l.ends_with(",true")).count();
            if reversals != 16 {
                problems.push(format!("seed {seed}: {reversals} reversals in trace"));
            }
        }
        for line in s.log.split(|&b| b == b'\n').skip(1).filter(|l| !l.is_empty()) {
            let e: LogEvent = serde_json::from_slice(line).unwrap();
            if let EventBody::Trial { step, .. } = e.event {
                let inc = step.unclamped_after_mm - step.level_before_mm;
                let expected = match step.moved {
                    Direction::Up => up,
                    Direction::Down => -down,
                    // First correct of a pair: no move.
                    Direction::None => 0.0,
                };
                steps += usize::from(step.moved != Direction::None);
                if (inc - expected).abs() > 1e-9 {
                    problems.push(format!("seed {seed}: {:?} move by {inc}", step.moved));
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "{} traces with 16 reversals each; {steps} increments all in {{+{up}, -{down:.4}}}; {}",
            2 * sessions.len(),
            problems.first().cloned().unwrap_or_else(|| "ok".into())
        ),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

#[test]
fn acceptance_criteria() {
    let sessions: Vec<(u64, SimulatedSession)> = run_batch(100, |i| {
        let seed = rep_seed(SEED + 5, i);
        (seed, simulate_session(&ExperimentConfig::default(), seed).unwrap())
    });
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("staircase equilibrium", Box::new(staircase_equilibrium)),
        ("classic ratio", Box::new(classic_ratio)),
        ("spatial summation direction", Box::new(spatial_summation)),
        ("JND estimator oracle", Box::new(jnd_oracle)),
        ("device anchor", Box::new(device_anchor)),
        ("protocol", Box::new(protocol)),
        ("replay determinism", Box::new(|| replay_determinism(&sessions[..20]))),
        ("ordering task", Box::new(|| ordering_task(&sessions))),
        ("staircase trace export", Box::new(|| trace_export(&sessions))),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(*name);
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed.len(), criteria.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
