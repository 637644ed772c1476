//! Newline-delimited JSON run log, one record per step.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::schedule::EosOutcome;
use super::step::HybridStepReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Hybrid,
    TfOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    /// Batch mean of the per-sequence teacher-forcing loss (sum over positions).
    pub l_tf: Option<f64>,
    /// Weighted free-running contribution `Σ w_n L_FR^(n)` (batch mean).
    pub l_fr_total: Option<f64>,
    /// `(term1, term2)` per executed iteration.
    pub l_fr: Vec<(f64, f64)>,
    /// Teacher-forcing loss per target token, comparable across lengths.
    pub l_tf_per_token: Option<f64>,
    pub n_executed: usize,
    /// Iteration budget in force during this step.
    pub current_n: usize,
    pub t1_used: Vec<usize>,
    pub premature_eos_at: Option<usize>,
    pub outcomes: Vec<EosOutcome>,
    pub forward_passes: usize,
    pub backward_count: usize,
    pub tokens: usize,
    pub wall_ms: f64,
}

impl StepRecord {
    pub(crate) fn from_report(step: u64, phase: Phase, current_n: usize, r: &HybridStepReport, wall: Duration) -> Self {
        let fr_total = r
            .l_fr
            .iter()
            .zip(&r.fr_weights)
            .map(|((a, b), w)| w * (a + b))
            .fold(0.0, |acc, x| acc + x);
        StepRecord {
            step,
            phase,
            l_tf: Some(r.l_tf),
            l_fr_total: Some(fr_total),
            l_fr: r.l_fr.clone(),
            l_tf_per_token: Some(r.l_tf * r.t1_used.len() as f64 / r.target_tokens.max(1) as f64),
            n_executed: r.n_executed,
            current_n,
            t1_used: r.t1_used.clone(),
            premature_eos_at: r.premature_eos_at,
            outcomes: r.outcomes.clone(),
            forward_passes: r.forward_count,
            backward_count: r.backward_count,
            tokens: r.target_tokens,
            wall_ms: wall.as_secs_f64() * 1e3,
        }
    }

    pub(crate) fn diverged(step: u64, phase: Phase, current_n: usize, _budget: usize, wall: Duration) -> Self {
        StepRecord {
            step,
            phase,
            l_tf: None,
            l_fr_total: None,
            l_fr: vec![],
            l_tf_per_token: None,
            n_executed: 0,
            current_n,
            t1_used: vec![],
            premature_eos_at: None,
            outcomes: vec![],
            forward_passes: 0,
            backward_count: 0,
            tokens: 0,
            wall_ms: wall.as_secs_f64() * 1e3,
        }
    }

    /// The record with its wall-clock field cleared, for reproducibility
    /// comparisons.
    pub fn without_timing(&self) -> StepRecord {
        StepRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("step records always serialize")
    }
}

/// Checks every record of a run for the structural invariants of a step:
/// exactly one backward pass, at most `1 + n_executed` forward passes,
/// `n_executed <= current_n <= n_max`, and a budget that moves by at most one
/// between consecutive steps. Returns one message per violation.
pub fn audit_run_log(records: &[StepRecord], n_max: usize) -> Vec<String> {
    let mut bad = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let s = r.step;
        if r.l_tf.is_none() {
            bad.push(format!("step {s}: diverged"));
            continue;
        }
        if r.backward_count != 1 {
            bad.push(format!("step {s}: {} backward passes", r.backward_count));
        }
        if r.forward_passes > 1 + r.n_executed {
            bad.push(format!("step {s}: {} forward passes for {} iterations", r.forward_passes, r.n_executed));
        }
        if r.current_n > n_max || r.n_executed > r.current_n {
            bad.push(format!(
                "step {s}: n_executed={} current_n={} n_max={n_max}",
                r.n_executed, r.current_n
            ));
        }
        if let Some(prev) = i.checked_sub(1).map(|j| &records[j]) {
            if prev.current_n.abs_diff(r.current_n) > 1 {
                bad.push(format!("step {s}: budget moved {} -> {}", prev.current_n, r.current_n));
            }
        }
    }
    bad
}

pub fn write_run_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(f, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_run_log(text: &str, path: &Path) -> Result<Vec<StepRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_run_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_run_log(&text, path)
}
