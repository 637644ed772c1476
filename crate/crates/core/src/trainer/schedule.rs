//! Prompt protection and the EOS-driven iteration scheduler.

use serde::{Deserialize, Serialize};

use crate::decode::DecodeMode;
use crate::error::{Error, Result};
use crate::losses::WeightMode;
use crate::model::EOS;

/// Protected-prefix schedule: the protected fraction moves linearly from
/// `start_fraction` to `end_fraction` over `ramp_steps` hybrid steps, then
/// stays at `end_fraction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T1Schedule {
    pub start_fraction: f64,
    pub end_fraction: f64,
    /// `None` ramps over the whole hybrid phase of the run.
    pub ramp_steps: Option<u64>,
}

impl Default for T1Schedule {
    fn default() -> Self {
        T1Schedule {
            start_fraction: 0.9,
            end_fraction: 0.1,
            ramp_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    /// Upper bound on free-running iterations per step.
    pub n_max: usize,
    /// Consecutive EOS successes needed to raise the iteration budget.
    pub k_success: usize,
    /// Allowed distance (positions) between predicted and true EOS.
    pub eos_tolerance: usize,
    pub t1_schedule: T1Schedule,
    /// Pure teacher-forcing steps before hybrid steps begin.
    pub warmup_steps: u64,
    pub decode_mode: DecodeMode,
    pub weights: WeightMode,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            n_max: 2,
            k_success: 3,
            eos_tolerance: 2,
            t1_schedule: T1Schedule::default(),
            warmup_steps: 500,
            decode_mode: DecodeMode::Greedy,
            weights: WeightMode::Uniform,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::config("trainer.n_max", "must be at least 1"));
        }
        if self.k_success < 1 {
            return Err(Error::config("trainer.k_success", "must be at least 1"));
        }
        let s = &self.t1_schedule;
        for (name, f) in [("start_fraction", s.start_fraction), ("end_fraction", s.end_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("trainer.t1_schedule.{name}"), format!("{f} outside [0, 1]")));
            }
        }
        if let DecodeMode::Sample { temperature, .. } = self.decode_mode {
            if !(temperature >= 0.0) {
                return Err(Error::config("trainer.decode_mode.temperature", "must be nonnegative"));
            }
        }
        self.weights.validate(self.n_max)
    }
}

/// Ablation switches; all off is the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeFlags {
    /// Plain teacher forcing throughout (no free-running iterations).
    pub tf_only: bool,
    /// Free-running inputs keep no ground-truth prefix (`t1 = 0`).
    pub no_prompt_protection: bool,
    /// Always run `n_max` iterations; EOS outcomes neither stop iterations,
    /// mask positions, nor change the budget.
    pub no_eos_adaptive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "at", rename_all = "snake_case")]
pub enum EosOutcome {
    Success,
    /// First predicted EOS at this zero-based position, too early.
    Premature(usize),
    Missing,
}

impl EosOutcome {
    pub fn is_success(self) -> bool {
        matches!(self, EosOutcome::Success)
    }
}

/// Classifies one iteration's argmax sequence against the true EOS index.
pub fn detect_premature_eos(pred: &[u32], gt_eos_index: usize, tolerance: usize) -> EosOutcome {
    match pred.iter().position(|&t| t == EOS) {
        Some(i) if i + tolerance < gt_eos_index => EosOutcome::Premature(i),
        Some(i) if i <= gt_eos_index + tolerance => EosOutcome::Success,
        _ => EosOutcome::Missing,
    }
}

/// Batch-level outcome: premature when more than half the sequences ended
/// early; otherwise success when at least half succeeded; otherwise missing.
pub fn majority_outcome(outcomes: &[EosOutcome]) -> EosOutcome {
    let n = outcomes.len();
    let premature: Vec<usize> = outcomes
        .iter()
        .filter_map(|o| match o {
            EosOutcome::Premature(i) => Some(*i),
            _ => None,
        })
        .collect();
    let successes = outcomes.iter().filter(|o| o.is_success()).count();
    if 2 * premature.len() > n {
        EosOutcome::Premature(premature.iter().copied().min().unwrap_or(0))
    } else if 2 * successes >= n {
        EosOutcome::Success
    } else {
        EosOutcome::Missing
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub current_n: usize,
    pub consecutive_successes: usize,
    pub global_step: u64,
    /// `(step, iteration of premature EOS)` for every hybrid step.
    pub eos_event_log: Vec<(u64, Option<usize>)>,
}

impl SchedulerState {
    pub fn new(initial_n: usize) -> Self {
        SchedulerState {
            current_n: initial_n,
            consecutive_successes: 0,
            global_step: 0,
            eos_event_log: Vec::new(),
        }
    }
}

/// One transition of the iteration-budget state machine:
///
/// * success: the streak grows; reaching `k_success` raises the budget by one
///   (clamped to `n_max`) and resets the streak;
/// * premature or missing: the streak resets and the budget drops by one
///   (never below 1).
pub fn update_schedule(state: &SchedulerState, outcome: EosOutcome, n_max: usize, k_success: usize) -> SchedulerState {
    let mut next = state.clone();
    if outcome.is_success() {
        next.consecutive_successes += 1;
        if next.consecutive_successes >= k_success {
            next.current_n = (next.current_n + 1).min(n_max);
            next.consecutive_successes = 0;
        }
    } else {
        next.consecutive_successes = 0;
        next.current_n = next.current_n.saturating_sub(1).max(1);
    }
    next
}

/// Protected fraction at a hybrid step (counted from the end of warmup).
pub fn t1_fraction(hybrid_step: u64, schedule: &T1Schedule, default_ramp: u64) -> f64 {
    let ramp = schedule.ramp_steps.unwrap_or(default_ramp);
    let progress = if ramp == 0 {
        1.0
    } else {
        (hybrid_step as f64 / ramp as f64).min(1.0)
    };
    schedule.start_fraction + (schedule.end_fraction - schedule.start_fraction) * progress
}

/// Protected prefix length for a target of length `t`: `floor(fraction·t)`,
/// at least 1 and at most `t`.
pub fn t1_for_step(hybrid_step: u64, schedule: &T1Schedule, default_ramp: u64, t: usize) -> usize {
    let f = t1_fraction(hybrid_step, schedule, default_ramp);
    // the epsilon keeps exact products like 0.1 * 30 from flooring to 2
    let raw = (f * t as f64 + 1e-9).floor() as usize;
    raw.clamp(1, t.max(1))
}

/// Input for the next free-running iteration: ground truth on the first `t1`
/// positions, the previous pass's predictions afterwards. `prev_pred` is
/// truncated or padded (with ground truth) to the length of `y_gt`.
pub fn build_iteration_input(prev_pred: &[u32], y_gt: &[u32], t1: usize) -> Result<Vec<u32>> {
    if t1 > y_gt.len() {
        return Err(Error::contract(format!("t1={t1} exceeds target length {}", y_gt.len())));
    }
    Ok(y_gt
        .iter()
        .enumerate()
        .map(|(i, &g)| if i < t1 { g } else { prev_pred.get(i).copied().unwrap_or(g) })
        .collect())
}
