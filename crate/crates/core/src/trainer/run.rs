use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, OptimizerConfig};
use super::runlog::{Phase, StepRecord};
use super::schedule::{t1_for_step, HybridConfig, ModeFlags, SchedulerState};
use super::step::{hybrid_step, ScheduleRule, StepPlan};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, SequenceExample};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub hybrid: HybridConfig,
    pub optimizer: OptimizerConfig,
    pub flags: ModeFlags,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hybrid.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Steps spent in the hybrid phase (zero for teacher-forcing-only runs).
    pub fn hybrid_steps(&self) -> u64 {
        if self.flags.tf_only {
            0
        } else {
            self.steps.saturating_sub(self.hybrid.warmup_steps)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    Diverged { step: u64, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub log: Vec<StepRecord>,
    pub state: SchedulerState,
    pub status: TrainStatus,
}

/// Consecutive non-finite steps tolerated before a run is aborted.
pub const DIVERGENCE_PATIENCE: u32 = 3;

fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn derive(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains from a seeded initialization. `on_step` sees every record and
/// the parameters after that step (for streaming logs and checkpoints).
pub fn train(
    dataset: &[SequenceExample],
    settings: &TrainSettings,
    mut on_step: impl FnMut(&StepRecord, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    settings.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for ex in dataset {
        ex.validate(&settings.model)?;
    }
    let params = ModelParams::<f32>::init(&settings.model, settings.seed)?;
    train_from(dataset, settings, params, &mut on_step)
}

pub fn train_from(
    dataset: &[SequenceExample],
    settings: &TrainSettings,
    mut params: ModelParams<f32>,
    on_step: &mut impl FnMut(&StepRecord, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    let hy = &settings.hybrid;
    let flags = settings.flags;
    let mut opt = Adam::new(settings.optimizer.clone(), &params);
    let initial_n = if flags.no_eos_adaptive { hy.n_max } else { 1 };
    let mut state = SchedulerState::new(if flags.tf_only { 0 } else { initial_n });
    let batch_seed = derive(settings.seed, 1);
    let ramp = settings.hybrid_steps();
    let mut log = Vec::with_capacity(settings.steps as usize);
    let mut bad_streak = 0;
    let mut status = TrainStatus::Completed;

    for step in 0..settings.steps {
        let started = Instant::now();
        let idx = batch_indices(batch_seed, step, dataset.len(), settings.batch_size);
        let batch: Vec<&SequenceExample> = idx.iter().map(|&i| &dataset[i]).collect();
        let hybrid = !flags.tf_only && step >= hy.warmup_steps;
        let phase = if flags.tf_only {
            Phase::TfOnly
        } else if hybrid {
            Phase::Hybrid
        } else {
            Phase::Warmup
        };
        let hybrid_step_idx = step.saturating_sub(hy.warmup_steps);
        let t1 = batch
            .iter()
            .map(|ex| {
                if !hybrid || flags.no_prompt_protection {
                    0
                } else {
                    t1_for_step(hybrid_step_idx, &hy.t1_schedule, ramp, ex.t2)
                }
            })
            .collect();
        let budget = if hybrid { state.current_n } else { 0 };
        let plan = StepPlan {
            budget,
            t1,
            eos_adaptive: !flags.no_eos_adaptive,
            eos_tolerance: hy.eos_tolerance,
            weights: hy.weights.clone(),
            decode: hy.decode_mode,
            rng_seed: derive(settings.seed, 2 + step),
            share_prefix: true,
        };
        let rule = ScheduleRule {
            n_max: hy.n_max,
            k_success: hy.k_success,
            hybrid,
        };
        let current_n = state.current_n;
        match hybrid_step(&mut params, &mut opt, &batch, &state, &plan, rule) {
            Ok((report, next)) => {
                bad_streak = 0;
                state = next;
                let rec = StepRecord::from_report(step, phase, current_n, &report, started.elapsed());
                on_step(&rec, &params)?;
                log.push(rec);
            }
            Err(Error::Divergence { reason, .. }) => {
                bad_streak += 1;
                state.global_step += 1;
                let rec = StepRecord::diverged(step, phase, current_n, budget, started.elapsed());
                on_step(&rec, &params)?;
                log.push(rec);
                if bad_streak >= DIVERGENCE_PATIENCE {
                    status = TrainStatus::Diverged { step, reason };
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutput {
        params,
        log,
        state,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_indices_are_counter_based() {
        let a = batch_indices(7, 3, 100, 8);
        let b = batch_indices(7, 3, 100, 8);
        let c = batch_indices(7, 4, 100, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&i| i < 100));
    }
}
