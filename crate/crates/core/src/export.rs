//! Data exports (CSV) and static SVG renders of staircase traces and
//! ordering strips. The CSV files are the contract; the SVGs are previews.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ordering::{LabeledPair, OrderingRun};
use crate::staircase::TrialRecord;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub index: u64,
    pub level_mm: f64,
    pub correct: bool,
    pub reversal: bool,
}

pub fn trace_rows(log: &[TrialRecord]) -> Vec<TraceRow> {
    log.iter()
        .map(|t| TraceRow {
            index: t.trial_index,
            level_mm: t.comparison_mm,
            correct: t.scored_correct,
            reversal: t.reversal,
        })
        .collect()
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// One row per scored trial: index, level_mm, correct, reversal.
pub fn trace_csv(log: &[TrialRecord]) -> String {
    let rows = trace_rows(log);
    if rows.is_empty() {
        return "index,level_mm,correct,reversal\n".into();
    }
    to_csv(rows)
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>, ExportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<TraceRow>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub label: String,
    pub first_mm: f64,
    pub second_mm: f64,
    pub position: f64,
    pub replays: u32,
}

pub fn placement_rows(run: &OrderingRun, pairs: &[LabeledPair]) -> Vec<PlacementRow> {
    run.placements
        .iter()
        .map(|p| {
            let pair = &pairs[p.label.index()];
            PlacementRow {
                label: p.label.to_string(),
                first_mm: pair.first_mm,
                second_mm: pair.second_mm,
                position: p.position,
                replays: run.replays.get(p.label.index()).copied().unwrap_or(0),
            }
        })
        .collect()
}

/// One row per placed pair: label, levels, position, replay count.
pub fn placements_csv(run: &OrderingRun, pairs: &[LabeledPair]) -> String {
    let rows = placement_rows(run, pairs);
    if rows.is_empty() {
        return "label,first_mm,second_mm,position,replays\n".into();
    }
    to_csv(rows)
}

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Level-versus-trial plot of one or more staircases with reversals marked.
pub fn trace_svg(series: &[(&str, &[TrialRecord])], reference_mm: f64) -> String {
    let all = series.iter().flat_map(|(_, s)| s.iter().map(|t| t.comparison_mm));
    let (lo, hi) = all.fold((reference_mm, reference_mm), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = (lo - 0.5, hi + 0.5);
    let n = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<line x1="{PAD}" y1="{r:.2}" x2="{x2}" y2="{r:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        r = y(reference_mm),
        x2 = W - PAD
    );
    for (k, (name, trials)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> =
            trials.iter().enumerate().map(|(i, t)| format!("{:.2},{:.2}", x(i), y(t.comparison_mm))).collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        for (i, t) in trials.iter().enumerate().filter(|(_, t)| t.reversal) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x(i), y(t.comparison_mm));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            PAD + 5.0,
            15.0 + 14.0 * k as f64
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">trial</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="5" y="{}" font-size="11">mm</text>"#, H / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Labels placed along a horizontal [0, 1] continuum.
pub fn strip_svg(run: &OrderingRun) -> String {
    let x = |p: f64| PAD + (W - 2.0 * PAD) * p;
    let mid = H / 4.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" viewBox="0 0 {W} {}">"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{}" fill="white"/>"#, H / 2.0);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{mid}" x2="{}" y2="{mid}" stroke="black"/>"#, W - PAD);
    let mut sorted = run.placements.clone();
    sorted.sort_by(|a, b| a.position.total_cmp(&b.position).then(a.label.cmp(&b.label)));
    let mut stack = 0;
    let mut last = f64::NAN;
    for p in &sorted {
        stack = if p.position == last { stack + 1 } else { 0 };
        last = p.position;
        let cx = x(p.position);
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{mid}" r="4" fill="{}"/>"#, COLORS[0]);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            cx,
            mid - 10.0 - 13.0 * stack as f64,
            p.label
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimulus::{Judgment, Response};

    fn rec(i: u64, level: f64, correct: bool, reversal: bool) -> TrialRecord {
        TrialRecord {
            trial_index: i,
            reference_first: i.is_multiple_of(2),
            comparison_mm: level,
            response: Response::new(Judgment::Equal, 0),
            scored_correct: correct,
            reversal,
        }
    }

    #[test]
    fn trace_csv_round_trips_bit_exact() {
        let log = vec![
            rec(0, 13.6, true, false),
            rec(1, 13.6, true, false),
            rec(2, 12.8607, false, true),
            rec(3, 0.1 + 0.2, true, false),
        ];
        let text = trace_csv(&log);
        assert!(text.starts_with("index,level_mm,correct,reversal\n"));
        let back = parse_trace_csv(&text).unwrap();
        assert_eq!(back, trace_rows(&log));
        assert_eq!(back[3].level_mm.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn empty_trace_has_header() {
        assert_eq!(parse_trace_csv(&trace_csv(&[])).unwrap(), vec![]);
    }

    #[test]
    fn svg_marks_reversals() {
        let log = vec![rec(0, 13.6, true, false), rec(1, 12.9, false, true), rec(2, 13.9, true, false)];
        let svg = trace_svg(&[("one site", &log)], 10.4);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains("one site"));
    }
}
