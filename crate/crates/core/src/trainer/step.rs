//! One hybrid training step: a teacher-forced pass, up to `current_n`
//! free-running passes over spliced inputs, one backward, one update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::schedule::{
    build_iteration_input, detect_premature_eos, majority_outcome, update_schedule, EosOutcome, SchedulerState,
};
use crate::decode::{pick_token, DecodeMode};
use crate::error::{Error, Result};
use crate::losses::{loss_fr_batch, loss_tf, total_loss, FrSegment, WeightMode};
use crate::model::{forward_pass, ModelConfig, ModelParams, PrefixShare, SeqInput, SequenceExample, Weights};
use crate::tape::{GradTape, Var};
use crate::tensor::Scalar;

/// Everything a step needs besides parameters and data.
#[derive(Clone, Debug)]
pub struct StepPlan {
    /// Free-running iterations allowed this step (0 gives a plain
    /// teacher-forcing step).
    pub budget: usize,
    /// Protected prefix length per example.
    pub t1: Vec<usize>,
    /// Whether EOS outcomes stop iterations, mask positions, and feed the
    /// scheduler.
    pub eos_adaptive: bool,
    pub eos_tolerance: usize,
    pub weights: WeightMode,
    pub decode: DecodeMode,
    /// Seeds sampled decoding inside iterations.
    pub rng_seed: u64,
    /// Reuse the teacher-forced pass's activations for each iteration's
    /// ground-truth prefix instead of recomputing them. Same values and
    /// gradients either way.
    pub share_prefix: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridStepReport {
    /// Batch mean of the per-sequence teacher-forcing loss.
    pub l_tf: f64,
    /// Batch means of `(term1, term2)` per executed iteration.
    pub l_fr: Vec<(f64, f64)>,
    pub fr_weights: Vec<f64>,
    pub l_total: f64,
    pub budget: usize,
    pub n_executed: usize,
    /// First iteration (1-based) in which any sequence predicted a premature
    /// EOS.
    pub premature_eos_at: Option<usize>,
    /// Batch outcome of each executed iteration.
    pub outcomes: Vec<EosOutcome>,
    pub t1_used: Vec<usize>,
    pub forward_count: usize,
    pub backward_count: usize,
    pub target_tokens: usize,
}

/// The recorded graph of one step, before backward.
pub struct StepGraph {
    pub total: Var,
    pub report: HybridStepReport,
    /// Outcome of the last executed iteration, if any ran.
    pub final_outcome: Option<EosOutcome>,
}

fn predictions<F: Scalar>(
    tape: &GradTape<F>,
    logits: Var,
    rows: std::ops::Range<usize>,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let l = tape.value(logits);
    rows.map(|r| pick_token(l.row(r), mode, rng)).collect()
}

/// Records the whole step on `tape` and returns the total-loss variable.
/// Each pass is tagged with its own tape segment (0 for teacher forcing,
/// `n` for iteration `n`).
pub fn build_step_graph<F: Scalar>(
    tape: &mut GradTape<F>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    batch: &[&SequenceExample],
    plan: &StepPlan,
) -> Result<StepGraph> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if plan.t1.len() != batch.len() {
        return Err(Error::contract("one t1 value per example is required"));
    }
    let bsz = batch.len();
    let inv_b = 1.0 / bsz as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);

    tape.begin_segment(0);
    let tf_inputs: Vec<SeqInput<'_>> = batch
        .iter()
        .map(|ex| SeqInput {
            prompt: &ex.prompt,
            target: &ex.target,
        })
        .collect();
    let tf_cache = forward_pass(tape, cfg, w, &tf_inputs, None)?;
    let tf = tf_cache.logits.clone();
    let mut forward_count = 1;
    let all_targets: Vec<u32> = batch.iter().flat_map(|ex| ex.target.iter().copied()).collect();
    let l_tf = loss_tf(tape, tf.logits, &all_targets)?;

    // previous pass's predictions over each example's first t2 positions
    let mut prev: Vec<Vec<u32>> = (0..bsz)
        .map(|b| {
            let mut p = predictions(tape, tf.logits, tf.rows_of(b), plan.decode, &mut rng);
            p.truncate(batch[b].t2);
            p
        })
        .collect();
    let mut active = vec![true; bsz];
    let mut fr_losses = Vec::new();
    let mut l_fr = Vec::new();
    let mut outcomes = Vec::new();
    let mut premature_eos_at = None;

    for n in 1..=plan.budget {
        let members: Vec<usize> = (0..bsz).filter(|&b| active[b]).collect();
        if members.is_empty() {
            break;
        }
        let gts: Vec<&[u32]> = members.iter().map(|&b| &batch[b].target[..batch[b].t2]).collect();
        let inputs: Vec<Vec<u32>> = members
            .iter()
            .zip(&gts)
            .map(|(&b, gt)| build_iteration_input(&prev[b], gt, plan.t1[b]))
            .collect::<Result<_>>()?;

        tape.begin_segment(n as u32);
        let seq: Vec<SeqInput<'_>> = members
            .iter()
            .zip(&inputs)
            .map(|(&b, inp)| SeqInput {
                prompt: &batch[b].prompt,
                target: inp,
            })
            .collect();
        // input positions 0..=P+t1 see only SOS, prompt and ground truth
        let shared: Vec<usize> = members.iter().map(|&b| batch[b].prompt.len() + plan.t1[b] + 1).collect();
        let share = plan.share_prefix.then_some(PrefixShare {
            cache: &tf_cache,
            source: &members,
            shared: &shared,
        });
        let out = forward_pass(tape, cfg, w, &seq, share)?.logits;
        forward_count += 1;

        let mut iter_outcomes = Vec::with_capacity(members.len());
        let mut valid: Vec<Vec<bool>> = Vec::with_capacity(members.len());
        for (i, &b) in members.iter().enumerate() {
            let ex = batch[b];
            let pred = predictions(tape, out.logits, out.rows_of(i), plan.decode, &mut rng);
            let outcome = if ex.t2 < ex.t() {
                // the true EOS lies outside the modeled window
                match pred.iter().position(|&t| t == crate::model::EOS) {
                    Some(e) => EosOutcome::Premature(e),
                    None => EosOutcome::Success,
                }
            } else {
                detect_premature_eos(&pred, ex.eos_index(), plan.eos_tolerance)
            };
            let mask = match outcome {
                EosOutcome::Premature(e) if plan.eos_adaptive => (0..ex.t2).map(|i| i <= e).collect(),
                _ => vec![true; ex.t2],
            };
            valid.push(mask);
            iter_outcomes.push(outcome);
            prev[b] = pred;
        }
        let segments: Vec<FrSegment<'_>> = members
            .iter()
            .enumerate()
            .map(|(i, &b)| FrSegment {
                y_gt: gts[i],
                t1: plan.t1[b],
                valid: &valid[i],
            })
            .collect();
        let fr = loss_fr_batch(tape, out.logits, &segments)?;
        l_fr.push((
            tape.value(fr.term1).item().to_f64_lossy() * inv_b,
            tape.value(fr.term2).item().to_f64_lossy() * inv_b,
        ));
        fr_losses.push(fr.total);

        let batch_outcome = majority_outcome(&iter_outcomes);
        outcomes.push(batch_outcome);
        if iter_outcomes.iter().any(|o| matches!(o, EosOutcome::Premature(_))) {
            premature_eos_at.get_or_insert(n);
        }
        if plan.eos_adaptive {
            for (&b, o) in members.iter().zip(&iter_outcomes) {
                if matches!(o, EosOutcome::Premature(_)) {
                    active[b] = false;
                }
            }
            if matches!(batch_outcome, EosOutcome::Premature(_)) {
                break;
            }
        }
    }

    let n_executed = fr_losses.len();
    let weights = plan.weights.for_iterations(n_executed)?;
    let summed = total_loss(tape, l_tf, &fr_losses, &weights)?;
    let total = tape.scale(summed, F::lit(inv_b))?;

    let report = HybridStepReport {
        l_tf: tape.value(l_tf).item().to_f64_lossy() * inv_b,
        l_fr,
        fr_weights: weights.as_slice().to_vec(),
        l_total: tape.value(total).item().to_f64_lossy(),
        budget: plan.budget,
        n_executed,
        premature_eos_at,
        outcomes: outcomes.clone(),
        t1_used: plan.t1.clone(),
        forward_count,
        backward_count: 0,
        target_tokens: all_targets.len(),
    };
    Ok(StepGraph {
        total,
        report,
        final_outcome: outcomes.last().copied(),
    })
}

/// Scheduler parameters applied after the update.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleRule {
    pub n_max: usize,
    pub k_success: usize,
    /// Whether this step counts as a hybrid step for the scheduler.
    pub hybrid: bool,
}

/// Runs one full step: graph, single backward, optimizer update, scheduler
/// transition. On a non-finite loss the parameters are left untouched.
pub fn hybrid_step<F: Scalar>(
    params: &mut ModelParams<F>,
    opt: &mut Adam<F>,
    batch: &[&SequenceExample],
    state: &SchedulerState,
    plan: &StepPlan,
    rule: ScheduleRule,
) -> Result<(HybridStepReport, SchedulerState)> {
    let mut tape = GradTape::<F>::new();
    let w = params.register(&mut tape, true);
    let graph = build_step_graph(&mut tape, &params.config, &w, batch, plan)?;
    if !tape.value(graph.total).is_finite() {
        return Err(Error::Divergence {
            step: state.global_step,
            reason: "non-finite loss".into(),
        });
    }
    let mut grads = tape.backward(graph.total)?;
    let list: Vec<_> = w.named().into_iter().map(|(_, v)| grads.take(*v)).collect();
    if list.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.global_step,
            reason: "non-finite gradient".into(),
        });
    }
    opt.step(params, &list)?;

    let mut report = graph.report;
    report.backward_count = tape.backward_count();
    let mut next = match graph.final_outcome {
        Some(o) if plan.eos_adaptive && rule.hybrid => update_schedule(state, o, rule.n_max, rule.k_success),
        _ => state.clone(),
    };
    if rule.hybrid {
        next.eos_event_log.push((state.global_step, report.premature_eos_at));
    }
    next.global_step += 1;
    Ok((report, next))
}
