//! Exposure-bias measurements: teacher-forced vs free-running accuracy by
//! position, premature-EOS iteration histograms, sequence-level failure
//! rates, and their CSV/SVG renderings.
//!
//! Free-running accuracy compares `pred[i]` with `gt[i]` positionally. After
//! one insertion or deletion every later position counts as wrong even if the
//! decode recovers, so the figure understates free-running quality; speech
//! token accuracy is inherently low by this measure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{free_run_batch, teacher_forced_batch};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SequenceExample};
use crate::tasks::{length_ratio, strip_eos, token_error_rate};
use crate::tensor::Scalar;
use crate::trainer::{detect_premature_eos, EosOutcome, Phase, StepRecord};

pub const BUCKET_WIDTH: usize = 10;

/// Teacher-forced and free-running predictions for a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub teacher_forced: Vec<Vec<u32>>,
    pub free_running: Vec<Vec<u32>>,
}

/// Runs both prediction modes (greedy decoding, cap `2T`).
pub fn predict<F: Scalar>(params: &ModelParams<F>, examples: &[SequenceExample]) -> Result<Predictions> {
    Ok(Predictions {
        teacher_forced: teacher_forced_batch(params, examples)?,
        free_running: free_run_batch(params, examples)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBucket {
    /// First position covered by the bucket.
    pub position: usize,
    pub acc_tf: f64,
    pub acc_fr: f64,
    pub gap: f64,
    /// Positions compared.
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub buckets: Vec<AccuracyBucket>,
}

impl AccuracyCurve {
    /// Pooled gap over all positions at or after `from`.
    pub fn mean_gap_from(&self, from: usize) -> Option<f64> {
        let (mut tf, mut fr, mut n) = (0.0, 0.0, 0usize);
        for b in self.buckets.iter().filter(|b| b.position >= from) {
            tf += b.acc_tf * b.n as f64;
            fr += b.acc_fr * b.n as f64;
            n += b.n;
        }
        (n > 0).then(|| (tf - fr) / n as f64)
    }

    /// Pooled `(acc_tf, acc_fr)` over every position.
    pub fn overall(&self) -> Option<(f64, f64)> {
        let n: usize = self.buckets.iter().map(|b| b.n).sum();
        (n > 0).then(|| {
            let tf: f64 = self.buckets.iter().map(|b| b.acc_tf * b.n as f64).sum();
            let fr: f64 = self.buckets.iter().map(|b| b.acc_fr * b.n as f64).sum();
            (tf / n as f64, fr / n as f64)
        })
    }
}

/// Positionwise exact-match accuracy in buckets of [`BUCKET_WIDTH`]. Every
/// ground-truth position, EOS included, is scored; a decode that ended early
/// scores zero at the positions it never produced.
pub fn accuracy_curve(examples: &[SequenceExample], preds: &Predictions) -> Result<AccuracyCurve> {
    if examples.is_empty() {
        return Err(Error::contract("accuracy curve over an empty dataset"));
    }
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let (tf, fr) = (&preds.teacher_forced[i], &preds.free_running[i]);
        for (pos, &gt) in ex.target.iter().enumerate() {
            let b = pos / BUCKET_WIDTH;
            if hits.len() <= b {
                hits.resize(b + 1, (0, 0, 0));
            }
            hits[b].0 += usize::from(tf.get(pos) == Some(&gt));
            hits[b].1 += usize::from(fr.get(pos) == Some(&gt));
            hits[b].2 += 1;
        }
    }
    let buckets = hits
        .into_iter()
        .enumerate()
        .map(|(b, (tf, fr, n))| {
            let acc_tf = tf as f64 / n as f64;
            let acc_fr = fr as f64 / n as f64;
            AccuracyBucket {
                position: b * BUCKET_WIDTH,
                acc_tf,
                acc_fr,
                gap: acc_tf - acc_fr,
                n,
            }
        })
        .collect();
    Ok(AccuracyCurve { buckets })
}

pub fn tf_fr_accuracy<F: Scalar>(params: &ModelParams<F>, examples: &[SequenceExample]) -> Result<AccuracyCurve> {
    if examples.is_empty() {
        return Err(Error::contract("accuracy curve over an empty dataset"));
    }
    accuracy_curve(examples, &predict(params, examples)?)
}

/// Per-example free-running outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub index: usize,
    pub ter: f64,
    pub length_ratio: f64,
    pub outcome: EosOutcome,
    pub repetition: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub n: usize,
    pub ter_mean: f64,
    pub premature_eos_rate: f64,
    pub missing_eos_rate: f64,
    pub length_ratio_mean: f64,
    /// Mean of `|length_ratio - 1|`.
    pub length_dev_mean: f64,
    pub repetition_rate: f64,
    pub scores: Vec<SequenceScore>,
}

/// True when some 4-gram occurs at least four times back to back.
pub fn has_repetition_loop(tokens: &[u32]) -> bool {
    const N: usize = 4;
    const REPEATS: usize = 4;
    let span = N * REPEATS;
    tokens.len() >= span
        && (0..=tokens.len() - span).any(|i| (1..REPEATS).all(|r| tokens[i..i + N] == tokens[i + r * N..i + (r + 1) * N]))
}

pub fn score_sequences(examples: &[SequenceExample], free_running: &[Vec<u32>], eos_tolerance: usize) -> SequenceReport {
    let scores: Vec<SequenceScore> = examples
        .iter()
        .zip(free_running)
        .enumerate()
        .map(|(index, (ex, pred))| SequenceScore {
            index,
            ter: token_error_rate(pred, &ex.target),
            length_ratio: length_ratio(pred, &ex.target),
            outcome: detect_premature_eos(pred, ex.eos_index(), eos_tolerance),
            repetition: has_repetition_loop(strip_eos(pred)),
        })
        .collect();
    let n = scores.len();
    let mean = |f: &dyn Fn(&SequenceScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    SequenceReport {
        n,
        ter_mean: mean(&|s| s.ter),
        premature_eos_rate: mean(&|s| f64::from(u8::from(matches!(s.outcome, EosOutcome::Premature(_))))),
        missing_eos_rate: mean(&|s| f64::from(u8::from(s.outcome == EosOutcome::Missing))),
        length_ratio_mean: mean(&|s| s.length_ratio),
        length_dev_mean: mean(&|s| (s.length_ratio - 1.0).abs()),
        repetition_rate: mean(&|s| f64::from(u8::from(s.repetition))),
        scores,
    }
}

pub fn sequence_report<F: Scalar>(
    params: &ModelParams<F>,
    examples: &[SequenceExample],
    eos_tolerance: usize,
) -> Result<SequenceReport> {
    let fr = free_run_batch(params, examples)?;
    Ok(score_sequences(examples, &fr, eos_tolerance))
}

pub const PHASES: [&str; 3] = ["early", "mid", "late"];

/// Premature-EOS counts by iteration index for three consecutive phases of
/// the hybrid part of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EosHistogram {
    /// Highest iteration index tracked.
    pub n_max: usize,
    /// `[start, end)` steps of each phase.
    pub bounds: [(u64, u64); 3],
    /// `counts[phase][n - 1]` = events at iteration `n`.
    pub counts: [Vec<u64>; 3],
}

impl EosHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Mean iteration index of the events in `phase`.
    pub fn first_moment(&self, phase: usize) -> Option<f64> {
        let c = &self.counts[phase];
        let total: u64 = c.iter().sum();
        (total > 0).then(|| c.iter().enumerate().map(|(i, &k)| (i + 1) as f64 * k as f64).sum::<f64>() / total as f64)
    }
}

/// Buckets the log's premature-EOS events. Phases split the hybrid steps into
/// thirds; warmup steps run no iterations and are left out.
pub fn eos_histogram(log: &[StepRecord]) -> EosHistogram {
    let hybrid: Vec<&StepRecord> = log.iter().filter(|r| r.phase == Phase::Hybrid).collect();
    let n_max = hybrid
        .iter()
        .map(|r| r.current_n.max(r.premature_eos_at.unwrap_or(0)))
        .max()
        .unwrap_or(0);
    let mut h = EosHistogram {
        n_max,
        bounds: [(0, 0); 3],
        counts: [vec![0; n_max], vec![0; n_max], vec![0; n_max]],
    };
    let (Some(first), Some(last)) = (hybrid.first(), hybrid.last()) else {
        return h;
    };
    let (start, end) = (first.step, last.step + 1);
    let span = end - start;
    let cut = |k: u64| start + span * k / 3;
    h.bounds = [(cut(0), cut(1)), (cut(1), cut(2)), (cut(2), end)];
    for r in hybrid {
        if let Some(n) = r.premature_eos_at {
            let phase = h.bounds.iter().position(|&(a, b)| r.step >= a && r.step < b).unwrap_or(2);
            h.counts[phase][n - 1] += 1;
        }
    }
    h
}

pub fn read_eos_histogram(path: &Path) -> Result<EosHistogram> {
    Ok(eos_histogram(&crate::trainer::read_run_log(path)?))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub const ACCURACY_HEADER: &str = "position,acc_tf,acc_fr,gap,n";
pub const HISTOGRAM_HEADER: &str = "phase,step_start,step_end,iteration,count";
pub const REPORT_HEADER: &str = "metric,value";
pub const SEQUENCES_HEADER: &str = "index,ter,length_ratio,outcome,eos_at,repetition";

pub fn accuracy_csv(curve: &AccuracyCurve) -> String {
    let mut s = format!("{ACCURACY_HEADER}\n");
    for b in &curve.buckets {
        let _ = writeln!(s, "{},{},{},{},{}", b.position, b.acc_tf, b.acc_fr, b.gap, b.n);
    }
    s
}

pub fn histogram_csv(h: &EosHistogram) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    for (p, name) in PHASES.iter().enumerate() {
        for (i, c) in h.counts[p].iter().enumerate() {
            let _ = writeln!(s, "{name},{},{},{},{c}", h.bounds[p].0, h.bounds[p].1, i + 1);
        }
    }
    s
}

pub fn report_csv(r: &SequenceReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (k, v) in [
        ("n", r.n as f64),
        ("ter_mean", r.ter_mean),
        ("premature_eos_rate", r.premature_eos_rate),
        ("missing_eos_rate", r.missing_eos_rate),
        ("length_ratio_mean", r.length_ratio_mean),
        ("length_dev_mean", r.length_dev_mean),
        ("repetition_rate", r.repetition_rate),
    ] {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

pub fn sequences_csv(r: &SequenceReport) -> String {
    let mut s = format!("{SEQUENCES_HEADER}\n");
    for sc in &r.scores {
        let (kind, at) = match sc.outcome {
            EosOutcome::Success => ("success", String::new()),
            EosOutcome::Premature(i) => ("premature", i.to_string()),
            EosOutcome::Missing => ("missing", String::new()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{kind},{at},{}",
            sc.index,
            sc.ter,
            sc.length_ratio,
            u8::from(sc.repetition)
        );
    }
    s
}

fn csv_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("expected header {header:?}"),
            })
        }
    }
    let width = header.split(',').count();
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != width {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected {width} columns, found {}", cells.len()),
                });
            }
            Ok((i + 1, cells))
        })
        .collect()
}

fn cell<T: std::str::FromStr>(s: &str, line: usize, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("{s:?}: {e}"),
    })
}

pub fn parse_accuracy_csv(text: &str, path: &Path) -> Result<AccuracyCurve> {
    let buckets = csv_rows(text, ACCURACY_HEADER, path)?
        .into_iter()
        .map(|(line, c)| {
            Ok(AccuracyBucket {
                position: cell(c[0], line, path)?,
                acc_tf: cell(c[1], line, path)?,
                acc_fr: cell(c[2], line, path)?,
                gap: cell(c[3], line, path)?,
                n: cell(c[4], line, path)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AccuracyCurve { buckets })
}

pub fn parse_histogram_csv(text: &str, path: &Path) -> Result<EosHistogram> {
    let mut h = EosHistogram::default();
    for (line, c) in csv_rows(text, HISTOGRAM_HEADER, path)? {
        let p = PHASES.iter().position(|&n| n == c[0]).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("unknown phase {:?}", c[0]),
        })?;
        h.bounds[p] = (cell(c[1], line, path)?, cell(c[2], line, path)?);
        let it: usize = cell(c[3], line, path)?;
        if it == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: "iterations are numbered from 1".into(),
            });
        }
        h.n_max = h.n_max.max(it);
        for counts in h.counts.iter_mut() {
            if counts.len() < h.n_max {
                counts.resize(h.n_max, 0);
            }
        }
        h.counts[p][it - 1] = cell(c[4], line, path)?;
    }
    Ok(h)
}

/// Reads back the scalar summary; per-sequence scores are not included.
pub fn parse_report_csv(text: &str, path: &Path) -> Result<SequenceReport> {
    let mut r = SequenceReport {
        n: 0,
        ter_mean: 0.0,
        premature_eos_rate: 0.0,
        missing_eos_rate: 0.0,
        length_ratio_mean: 0.0,
        length_dev_mean: 0.0,
        repetition_rate: 0.0,
        scores: vec![],
    };
    for (line, c) in csv_rows(text, REPORT_HEADER, path)? {
        let v: f64 = cell(c[1], line, path)?;
        match c[0] {
            "n" => r.n = v as usize,
            "ter_mean" => r.ter_mean = v,
            "premature_eos_rate" => r.premature_eos_rate = v,
            "missing_eos_rate" => r.missing_eos_rate = v,
            "length_ratio_mean" => r.length_ratio_mean = v,
            "length_dev_mean" => r.length_dev_mean = v,
            "repetition_rate" => r.repetition_rate = v,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("unknown metric {other:?}"),
                })
            }
        }
    }
    Ok(r)
}

pub fn parse_sequences_csv(text: &str, path: &Path) -> Result<Vec<SequenceScore>> {
    csv_rows(text, SEQUENCES_HEADER, path)?
        .into_iter()
        .map(|(line, c)| {
            let outcome = match c[3] {
                "success" => EosOutcome::Success,
                "missing" => EosOutcome::Missing,
                "premature" => EosOutcome::Premature(cell(c[4], line, path)?),
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        reason: format!("unknown outcome {other:?}"),
                    })
                }
            };
            Ok(SequenceScore {
                index: cell(c[0], line, path)?,
                ter: cell(c[1], line, path)?,
                length_ratio: cell(c[2], line, path)?,
                outcome,
                repetition: cell::<u8>(c[5], line, path)? == 1,
            })
        })
        .collect()
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 300.0;
const MARGIN: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"20\">{title}</text>\n\
         <line x1=\"{MARGIN}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{y0}\" stroke=\"black\"/>\n{body}</svg>\n",
        y0 = SVG_H - MARGIN,
        x1 = SVG_W - MARGIN,
    )
}

pub fn accuracy_svg(curve: &AccuracyCurve) -> String {
    let n = curve.buckets.len().max(2) - 1;
    let x = |i: usize| MARGIN + (SVG_W - 2.0 * MARGIN) * i as f64 / n as f64;
    let y = |v: f64| SVG_H - MARGIN - (SVG_H - 2.0 * MARGIN) * v.clamp(0.0, 1.0);
    let mut body = String::new();
    for (color, pick) in [("steelblue", 0), ("firebrick", 1)] {
        let pts: Vec<String> = curve
            .buckets
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let v = if pick == 0 { b.acc_tf } else { b.acc_fr };
                format!("{:.1},{:.1}", x(i), y(v))
            })
            .collect();
        let _ = writeln!(
            body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    let _ = writeln!(body, "<text x=\"{}\" y=\"{}\" fill=\"steelblue\">teacher forcing</text>", SVG_W - 150.0, MARGIN);
    let _ = writeln!(body, "<text x=\"{}\" y=\"{}\" fill=\"firebrick\">free running</text>", SVG_W - 150.0, MARGIN + 14.0);
    svg_frame("token accuracy by position", &body)
}

pub fn histogram_svg(h: &EosHistogram) -> String {
    let peak = h.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let groups = h.n_max.max(1) as f64;
    let gw = (SVG_W - 2.0 * MARGIN) / groups;
    let bw = gw / 4.0;
    let mut body = String::new();
    for (p, color) in ["#9ecae1", "#4292c6", "#08519c"].iter().enumerate() {
        for (i, &c) in h.counts[p].iter().enumerate() {
            let bh = (SVG_H - 2.0 * MARGIN) * c as f64 / peak;
            let _ = writeln!(
                body,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bw:.1}\" height=\"{bh:.1}\" fill=\"{color}\"/>",
                MARGIN + gw * i as f64 + bw * (p as f64 + 0.5),
                SVG_H - MARGIN - bh
            );
        }
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            SVG_W - 100.0,
            MARGIN + 14.0 * p as f64,
            PHASES[p]
        );
    }
    svg_frame("premature EOS by iteration", &body)
}

/// Files written by [`emit_plots`].
pub const ARTIFACTS: [&str; 6] = [
    "accuracy.csv",
    "accuracy.svg",
    "eos_histogram.csv",
    "eos_histogram.svg",
    "sequence_report.csv",
    "sequences.csv",
];

/// Writes every diagnostic artifact under `dir`. Returns the paths written.
pub fn emit_plots(dir: &Path, curve: &AccuracyCurve, hist: &EosHistogram, report: &SequenceReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bodies = [
        accuracy_csv(curve),
        accuracy_svg(curve),
        histogram_csv(hist),
        histogram_svg(hist),
        report_csv(report),
        sequences_csv(report),
    ];
    let mut out = Vec::new();
    for (name, body) in ARTIFACTS.iter().zip(bodies) {
        let p = dir.join(name);
        write_file(&p, &body)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repetition_needs_four_back_to_back_copies() {
        let unit = [2u32, 3, 4, 5];
        let three: Vec<u32> = unit.iter().cycle().take(12).copied().collect();
        let four: Vec<u32> = [9].iter().chain(unit.iter().cycle().take(16)).copied().collect();
        assert!(!has_repetition_loop(&three));
        assert!(has_repetition_loop(&four));
        assert!(has_repetition_loop(&[7; 16]));
        assert!(!has_repetition_loop(&[7; 15]));
    }

    #[test]
    fn gap_is_recomputed_from_counts() {
        let ex = vec![SequenceExample::new(vec![0], vec![2, 3, 4, 1])];
        let preds = Predictions {
            teacher_forced: vec![vec![2, 3, 4, 1]],
            free_running: vec![vec![2, 4]],
        };
        let c = accuracy_curve(&ex, &preds).unwrap();
        assert_eq!(c.buckets.len(), 1);
        assert_eq!(c.buckets[0].acc_tf, 1.0);
        assert_eq!(c.buckets[0].acc_fr, 0.25);
        assert_eq!(c.buckets[0].gap, 0.75);
        assert!(accuracy_curve(&[], &preds).is_err());
    }
}
