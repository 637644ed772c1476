use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("optimizer.{name}"), "must lie in [0, 1)")); 
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be nonnegative"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("optimizer.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// Adam moments, one buffer per weight in canonical order.
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    cfg: OptimizerConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: OptimizerConfig, params: &ModelParams<F>) -> Self {
        let zeros = || -> Vec<Vec<F>> {
            params
                .weights
                .named()
                .iter()
                .map(|(_, t)| vec![F::zero(); t.len()])
                .collect()
        };
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` must follow the canonical weight order;
    /// `None` entries are weights that received no gradient.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
        let leaves = params.weights.leaves_mut();
        if grads.len() != leaves.len() {
            return Err(Error::contract("gradient list does not match parameter list"));
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c => F::lit(c / norm),
            _ => F::one(),
        };
        self.t += 1;
        let (b1, b2) = (F::lit(self.cfg.beta1), F::lit(self.cfg.beta2));
        let bc1 = F::lit(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = F::lit(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = F::lit(self.cfg.learning_rate);
        let eps = F::lit(self.cfg.eps);
        let decay = F::lit(self.cfg.learning_rate * self.cfg.weight_decay);
        for (i, (w, g)) in leaves.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in w.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] * clip;
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps) - decay * *x;
            }
        }
        Ok(())
    }
}
