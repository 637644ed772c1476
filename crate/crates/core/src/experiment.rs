//! End-to-end runs: dataset generation from a [`RunConfig`], training, and
//! evaluation on a split, plus a compact serializable summary used to compare
//! runs.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diagnostics::{
    accuracy_curve, eos_histogram, predict, score_sequences, AccuracyCurve, EosHistogram, Predictions,
    SequenceReport,
};
use crate::error::Result;
use crate::model::ModelParams;
use crate::tasks::{Dataset, Split};
use crate::trainer::{train, Phase, StepRecord, TrainOutput, TrainStatus};

/// First position of the long-range accuracy gap (buckets 6 onward).
pub const GAP_FROM: usize = 50;

/// Training split for `cfg`.
pub fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::generate(&cfg.task, Split::Train, cfg.data.train_examples)
}

/// Generates the training split and trains.
pub fn run_training(
    cfg: &RunConfig,
    on_step: impl FnMut(&StepRecord, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = training_set(cfg)?;
    train(&data.examples, &cfg.train_settings(), on_step)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub split: Split,
    pub data: Dataset,
    pub predictions: Predictions,
    pub curve: AccuracyCurve,
    pub report: SequenceReport,
}

/// Teacher-forced and free-running evaluation on `cfg.data.eval_examples`
/// examples of `split`.
pub fn evaluate(params: &ModelParams<f32>, cfg: &RunConfig, split: Split) -> Result<Evaluation> {
    let data = Dataset::generate(&cfg.task, split, cfg.data.eval_examples)?;
    let predictions = predict(params, &data.examples)?;
    let curve = accuracy_curve(&data.examples, &predictions)?;
    let report = score_sequences(&data.examples, &predictions.free_running, cfg.trainer.eos_tolerance);
    Ok(Evaluation {
        split,
        data,
        predictions,
        curve,
        report,
    })
}

/// Mean wall time of the steps in `phase`, if any ran.
pub fn mean_step_ms(log: &[StepRecord], phase: Phase) -> Option<f64> {
    let ms: Vec<f64> = log.iter().filter(|r| r.phase == phase).map(|r| r.wall_ms).collect();
    (!ms.is_empty()).then(|| ms.iter().sum::<f64>() / ms.len() as f64)
}

/// Short label for a run's mode flags.
pub fn mode_label(cfg: &RunConfig) -> &'static str {
    let f = cfg.flags;
    match (f.tf_only, f.no_prompt_protection, f.no_eos_adaptive) {
        (true, _, _) => "tf-only",
        (false, false, false) => "full",
        (false, true, false) => "no-prompt-protection",
        (false, false, true) => "no-eos-adaptive",
        (false, true, true) => "no-pp-no-eos",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: String,
    pub seed: u64,
    pub n_max: usize,
    pub steps: u64,
    pub completed: bool,
    pub split: String,
    pub acc_tf: Option<f64>,
    pub acc_fr: Option<f64>,
    /// Pooled `acc_tf - acc_fr` from [`GAP_FROM`] on.
    pub gap: Option<f64>,
    pub ter: f64,
    pub premature_eos_rate: f64,
    pub missing_eos_rate: f64,
    pub length_ratio: f64,
    pub length_dev: f64,
    pub repetition_rate: f64,
    pub histogram: EosHistogram,
    pub mean_step_ms: Option<f64>,
    pub mean_hybrid_step_ms: Option<f64>,
}

impl RunSummary {
    pub fn new(cfg: &RunConfig, log: &[StepRecord], status: &TrainStatus, eval: &Evaluation) -> Self {
        let overall = eval.curve.overall();
        let all_ms = (!log.is_empty()).then(|| log.iter().map(|r| r.wall_ms).sum::<f64>() / log.len() as f64);
        let r = &eval.report;
        RunSummary {
            config_hash: cfg.hash(),
            mode: mode_label(cfg).to_string(),
            seed: cfg.seed,
            n_max: cfg.trainer.n_max,
            steps: cfg.optimizer.steps,
            completed: *status == TrainStatus::Completed,
            split: eval.split.name().to_string(),
            acc_tf: overall.map(|o| o.0),
            acc_fr: overall.map(|o| o.1),
            gap: eval.curve.mean_gap_from(GAP_FROM),
            ter: r.ter_mean,
            premature_eos_rate: r.premature_eos_rate,
            missing_eos_rate: r.missing_eos_rate,
            length_ratio: r.length_ratio_mean,
            length_dev: r.length_dev_mean,
            repetition_rate: r.repetition_rate,
            histogram: eos_histogram(log),
            mean_step_ms: all_ms,
            mean_hybrid_step_ms: mean_step_ms(log, Phase::Hybrid),
        }
    }
}

/// A finished run as seen by [`compare_runs`]: its step log and, when it
/// has been evaluated, its summary.
#[derive(Clone, Debug)]
pub struct RunView {
    pub name: String,
    pub log: Vec<StepRecord>,
    pub summary: Option<RunSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Teacher-forcing loss per token averaged over the last tenth of the run.
pub fn final_tf_loss(log: &[StepRecord]) -> Option<f64> {
    let tail = (log.len() / 10).max(1).min(log.len());
    mean(log[log.len() - tail..].iter().filter_map(|r| r.l_tf_per_token))
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.4}", b - a),
        _ => "-".to_string(),
    }
}

/// Markdown comparison of run `b` against run `a`: step cost, final
/// losses, EOS histograms, and evaluation metrics when both have them.
pub fn compare_runs(a: &RunView, b: &RunView) -> String {
    let mut rows: Vec<(&str, Option<f64>, Option<f64>)> = vec![
        ("steps", Some(a.log.len() as f64), Some(b.log.len() as f64)),
        (
            "mean step ms",
            mean(a.log.iter().map(|r| r.wall_ms)),
            mean(b.log.iter().map(|r| r.wall_ms)),
        ),
        ("final TF loss / token", final_tf_loss(&a.log), final_tf_loss(&b.log)),
        (
            "mean FR iterations",
            mean(a.log.iter().map(|r| r.n_executed as f64)),
            mean(b.log.iter().map(|r| r.n_executed as f64)),
        ),
    ];
    let (ha, hb) = (eos_histogram(&a.log), eos_histogram(&b.log));
    rows.push(("premature EOS events", Some(ha.total() as f64), Some(hb.total() as f64)));
    for (i, label) in [(0, "EOS moment, first third"), (2, "EOS moment, last third")] {
        rows.push((label, ha.first_moment(i), hb.first_moment(i)));
    }
    if let (Some(sa), Some(sb)) = (&a.summary, &b.summary) {
        rows.extend([
            ("acc_tf", sa.acc_tf, sb.acc_tf),
            ("acc_fr", sa.acc_fr, sb.acc_fr),
            ("gap from position 50", sa.gap, sb.gap),
            ("token error rate", Some(sa.ter), Some(sb.ter)),
            ("premature EOS rate", Some(sa.premature_eos_rate), Some(sb.premature_eos_rate)),
            ("missing EOS rate", Some(sa.missing_eos_rate), Some(sb.missing_eos_rate)),
            ("mean |length ratio - 1|", Some(sa.length_dev), Some(sb.length_dev)),
        ]);
    }
    let ratio = match (mean(a.log.iter().map(|r| r.wall_ms)), mean(b.log.iter().map(|r| r.wall_ms))) {
        (Some(x), Some(y)) if x > 0.0 => format!("{:.3}", y / x),
        _ => "-".to_string(),
    };
    let mut out = format!("# {} vs {}\n\nstep-cost ratio ({} / {}): {ratio}\n\n", b.name, a.name, b.name, a.name);
    out.push_str(&format!("| metric | {} | {} | delta |\n|---|---|---|---|\n", a.name, b.name));
    for (label, x, y) in rows {
        out.push_str(&format!("| {label} | {} | {} | {} |\n", fmt(x), fmt(y), delta(x, y)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::ModeFlags;

    #[test]
    fn labels() {
        let mut cfg = RunConfig::default();
        assert_eq!(mode_label(&cfg), "full");
        cfg.flags = ModeFlags {
            no_eos_adaptive: true,
            ..ModeFlags::default()
        };
        assert_eq!(mode_label(&cfg), "no-eos-adaptive");
    }

    #[test]
    fn identical_runs_have_zero_deltas() {
        let rec = |step, ms| StepRecord {
            step,
            phase: Phase::Hybrid,
            l_tf: Some(2.0),
            l_fr_total: Some(1.0),
            l_fr: vec![(0.5, 0.5)],
            l_tf_per_token: Some(0.2),
            n_executed: 1,
            current_n: 1,
            t1_used: vec![1],
            premature_eos_at: Some(1),
            outcomes: vec![],
            forward_passes: 2,
            backward_count: 1,
            tokens: 10,
            wall_ms: ms,
        };
        let log: Vec<StepRecord> = (0..6).map(|s| rec(s, 3.0)).collect();
        let a = RunView {
            name: "a".into(),
            log: log.clone(),
            summary: None,
        };
        let md = compare_runs(&a, &RunView { name: "b".into(), ..a.clone() });
        assert!(md.contains("step-cost ratio (b / a): 1.000"));
        let deltas: Vec<&str> = md.lines().skip(6).map(|l| l.rsplit('|').nth(1).unwrap().trim()).collect();
        assert!(deltas.iter().all(|d| *d == "+0.0000" || *d == "-"), "{md}");

        let slow = RunView {
            name: "slow".into(),
            log: (0..6).map(|s| rec(s, 4.5)).collect(),
            summary: None,
        };
        assert!(compare_runs(&a, &slow).contains("step-cost ratio (slow / a): 1.500"));
    }
}
