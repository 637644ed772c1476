//! Teacher-forcing loss, free-running loss, and their weighted total.
//!
//! Losses are sums over positions (not means). Positions are indexed from 1
//! at the first target token after the prompt; in code, row `i` is position
//! `i + 1`, so "positions `1..=t1`" are rows `0..t1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Scalar;

/// How per-iteration weights are chosen for the iterations actually run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightMode {
    /// `w_n = 1/N` over the `N` executed iterations.
    Uniform,
    /// Explicit weights for iterations `1..`; the first `N` are used, and
    /// rescaled to sum to one when `normalize` is set.
    Custom { weights: Vec<f64>, normalize: bool },
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Uniform
    }
}

impl WeightMode {
    pub fn validate(&self, n_max: usize) -> Result<()> {
        if let WeightMode::Custom { weights, .. } = self {
            if weights.len() < n_max {
                return Err(Error::config(
                    "trainer.weights.weights",
                    format!("{} weights given for up to {n_max} iterations", weights.len()),
                ));
            }
            if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::config("trainer.weights.weights", "weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn for_iterations(&self, n: usize) -> Result<LossWeights> {
        match self {
            WeightMode::Uniform => Ok(LossWeights::uniform(n)),
            WeightMode::Custom { weights, normalize } => {
                let w = weights
                    .get(..n)
                    .ok_or_else(|| Error::contract(format!("no weights configured for {n} iterations")))?
                    .to_vec();
                if *normalize {
                    LossWeights::normalized(w)
                } else {
                    LossWeights::new(w)
                }
            }
        }
    }
}

/// Weights `w_1..w_N` of the free-running losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::contract("loss weights must be finite and nonnegative"));
        }
        Ok(LossWeights(w))
    }

    pub fn uniform(n: usize) -> Self {
        LossWeights(vec![1.0 / n.max(1) as f64; n])
    }

    pub fn normalized(w: Vec<f64>) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if w.is_empty() {
            return Ok(LossWeights(w));
        }
        if !(s > 0.0) {
            return Err(Error::contract("cannot normalize weights that sum to zero"));
        }
        LossWeights::new(w.into_iter().map(|x| x / s).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn to_targets(y: &[u32]) -> Vec<usize> {
    y.iter().map(|&t| t as usize).collect()
}

fn check_rows<F: Scalar>(tape: &GradTape<F>, logits: Var, n: usize, what: &str) -> Result<()> {
    let rows = tape.value(logits).rows();
    if rows != n {
        return Err(Error::contract(format!("{what}: {rows} logit rows for {n} targets")));
    }
    Ok(())
}

/// Teacher-forcing loss: `-Σ_t log P(y_t | y_<t^gt, X)` over all positions.
pub fn loss_tf<F: Scalar>(tape: &mut GradTape<F>, logits: Var, y_gt: &[u32]) -> Result<Var> {
    check_rows(tape, logits, y_gt.len(), "loss_tf")?;
    tape.softmax_cross_entropy(logits, &to_targets(y_gt), &vec![true; y_gt.len()])
}

/// The two terms of a free-running loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct FrLoss {
    /// Positions `1..=t1` (conditioned on ground truth only).
    pub term1: Var,
    /// Valid positions `t1+1..=T2` (conditioned on predicted tokens).
    pub term2: Var,
    pub total: Var,
}

/// One sequence's share of a batched free-running loss.
#[derive(Clone, Debug)]
pub struct FrSegment<'a> {
    pub y_gt: &'a [u32],
    pub t1: usize,
    pub valid: &'a [bool],
}

/// Free-running loss for one sequence.
pub fn loss_fr<F: Scalar>(
    tape: &mut GradTape<F>,
    logits: Var,
    y_gt: &[u32],
    t1: usize,
    valid: &[bool],
) -> Result<FrLoss> {
    loss_fr_batch(tape, logits, &[FrSegment { y_gt, t1, valid }])
}

/// Free-running loss summed over consecutive row segments of `logits`.
pub fn loss_fr_batch<F: Scalar>(tape: &mut GradTape<F>, logits: Var, segments: &[FrSegment<'_>]) -> Result<FrLoss> {
    let mut targets = Vec::new();
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    for seg in segments {
        let t2 = seg.y_gt.len();
        if seg.t1 > t2 {
            return Err(Error::contract(format!("t1={} exceeds T2={t2}", seg.t1)));
        }
        if seg.valid.len() != t2 {
            return Err(Error::contract(format!(
                "validity mask has {} entries for T2={t2}",
                seg.valid.len()
            )));
        }
        targets.extend(to_targets(seg.y_gt));
        m1.extend((0..t2).map(|i| i < seg.t1));
        m2.extend((0..t2).map(|i| i >= seg.t1 && seg.valid[i]));
    }
    check_rows(tape, logits, targets.len(), "loss_fr")?;
    let term1 = tape.softmax_cross_entropy(logits, &targets, &m1)?;
    let term2 = tape.softmax_cross_entropy(logits, &targets, &m2)?;
    let total = tape.weighted_sum(&[(term1, F::one()), (term2, F::one())])?;
    Ok(FrLoss { term1, term2, total })
}

/// `L_TF + Σ_n w_n · L_FR^(n)`.
pub fn total_loss<F: Scalar>(tape: &mut GradTape<F>, l_tf: Var, l_fr: &[Var], weights: &LossWeights) -> Result<Var> {
    if l_fr.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} free-running losses but {} weights",
            l_fr.len(),
            weights.len()
        )));
    }
    let mut terms = vec![(l_tf, F::one())];
    terms.extend(l_fr.iter().zip(weights.as_slice()).map(|(&v, &w)| (v, F::lit(w))));
    tape.weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_tf_loss() {
        let mut tape = GradTape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[5, 4]));
        let v = loss_tf(&mut tape, l, &[0, 1, 2, 3, 1]).unwrap();
        assert!((tape.value(v).item() - 5.0 * 4f64.ln()).abs() < 1e-12);
        assert!((5.0 * 4f64.ln() - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let y = [2u32, 0, 3];
        let mut tape = GradTape::<f64>::new();
        let l = tape.constant(Tensor::from_fn(&[3, 4], |i| if i % 4 == y[i / 4] as usize { 30.0 } else { 0.0 }));
        let v = loss_tf(&mut tape, l, &y).unwrap();
        assert!(tape.value(v).item() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        let mut tape = GradTape::<f32>::new();
        let l = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(loss_tf(&mut tape, l, &[0, 1]).is_err());
        assert!(loss_fr(&mut tape, l, &[0, 1, 2], 4, &[true; 3]).is_err());
    }

    #[test]
    fn fr_degenerate_cases_equal_tf() {
        let y = [3u32, 1, 4, 1, 2];
        let mut tape = GradTape::<f32>::new();
        let l = tape.constant(Tensor::from_fn(&[5, 6], |i| ((i * 7919) % 13) as f32 * 0.31 - 2.0));
        let tf = loss_tf(&mut tape, l, &y).unwrap();
        let full = loss_fr(&mut tape, l, &y, 5, &[true; 5]).unwrap();
        assert_eq!(tape.value(full.term2).item(), 0.0);
        assert_eq!(tape.value(full.total).item(), tape.value(tf).item());
        let none = loss_fr(&mut tape, l, &y, 0, &[true; 5]).unwrap();
        assert_eq!(tape.value(none.term1).item(), 0.0);
        assert_eq!(tape.value(none.total).item(), tape.value(tf).item());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = GradTape::<f64>::new();
        let tf = tape.constant(Tensor::scalar(2.0));
        let a = tape.constant(Tensor::scalar(4.0));
        let b = tape.constant(Tensor::scalar(6.0));
        let none = total_loss(&mut tape, tf, &[], &LossWeights::uniform(0)).unwrap();
        assert_eq!(tape.value(none).item(), 2.0);
        let two = total_loss(&mut tape, tf, &[a, b], &LossWeights::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(tape.value(two).item(), 7.0);
        assert!(total_loss(&mut tape, tf, &[a], &LossWeights::uniform(2)).is_err());
    }

    #[test]
    fn weight_modes() {
        assert_eq!(WeightMode::Uniform.for_iterations(4).unwrap().as_slice(), &[0.25; 4]);
        let custom = WeightMode::Custom {
            weights: vec![1.0, 3.0, 4.0],
            normalize: true,
        };
        assert_eq!(custom.for_iterations(2).unwrap().as_slice(), &[0.25, 0.75]);
        assert!(custom.for_iterations(4).is_err());
        assert!(custom.validate(4).is_err());
        assert!(LossWeights::new(vec![-1.0]).is_err());
        let s: f64 = LossWeights::uniform(3).as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }
}
