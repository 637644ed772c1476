//! The standard gradient-check battery: every differentiable tape op on
//! randomized inputs, plus a full two-layer model under a teacher-forced and
//! a prefix-shared free-running pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::gradcheck::{grad_check, DENOM_FLOOR, GradCheckOptions, GradCheckReport, Objective, Precision, Stencil};
use crate::losses::{loss_fr_batch, loss_tf, total_loss, FrSegment, LossWeights};
use crate::model::{forward_pass, weight_shapes, ModelConfig, ModelParams, PrefixShare, SeqInput, Weights};
use crate::tape::{AttnLayout, GradTape, Lookup, Var};
use crate::tensor::{Scalar, Tensor};

/// Finite-difference step in both modes. With the four-point stencil the
/// truncation error is `O(h^4)`, well below either threshold.
pub const H: f64 = 1e-3;
pub const TOL_F32: f64 = 1e-3;
/// Relative-error floor in `f32` mode. `f32` rounding leaves absolute
/// errors near `1e-7` on gradients that nearly cancel, so coordinates below
/// this magnitude are effectively held to an absolute tolerance of about
/// `TOL_F32 * FLOOR_F32`.
pub const FLOOR_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    MatMul,
    Add,
    Mul,
    AddRow,
    Scale,
    Gelu,
    LayerNorm,
    Embed,
    SelectRows,
    GatherRows,
    Attention,
    Softmax,
    CrossEntropy,
    Sum,
    WeightedSum,
    Model,
}

pub const ALL_CASES: [Case; 16] = [
    Case::MatMul,
    Case::Add,
    Case::Mul,
    Case::AddRow,
    Case::Scale,
    Case::Gelu,
    Case::LayerNorm,
    Case::Embed,
    Case::SelectRows,
    Case::GatherRows,
    Case::Attention,
    Case::Softmax,
    Case::CrossEntropy,
    Case::Sum,
    Case::WeightedSum,
    Case::Model,
];

/// Configuration of the model case.
pub fn model_case_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        text_vocab: 5,
        speech_vocab: 6,
        max_len: 16,
    }
}

// (prompt, target, t1, predicted continuation, validity)
type FrFixture = (&'static [u32], &'static [u32], usize, &'static [u32], &'static [bool]);

const MODEL_BATCH: [FrFixture; 2] = [
    (&[2, 3, 4], &[2, 4, 3, 5, 1], 2, &[2, 4, 5, 5, 3], &[true, true, true, true, false]),
    (&[3, 2], &[5, 2, 3, 1], 1, &[5, 1, 2, 2], &[true, true, true, true]),
];

/// Key biases shift every score in a softmax row equally, so their exact
/// gradient is zero and a relative error on them measures rounding noise
/// only. The model case holds them fixed; [`key_bias_gradient`] checks the
/// zero directly.
pub fn is_key_bias(name: &str) -> bool {
    name.ends_with(".bk")
}

/// Names of the weights the model case differentiates, in parameter order.
pub fn model_names(cfg: &ModelConfig) -> Vec<String> {
    weight_shapes(cfg)
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !is_key_bias(n))
        .collect()
}

fn fixed_key_bias<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::from_fn(shape, |i| F::lit(0.2 * (i as f64 + 1.0).cos()))
}

/// Fixed pseudo-random projection so each op's output reduces to a scalar
/// with a non-trivial gradient.
fn project<F: Scalar>(tape: &mut GradTape<F>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = tape.constant(Tensor::from_fn(&shape, |i| F::lit((i as f64 * 1.618 + 0.4).sin())));
    let y = tape.mul(x, r)?;
    tape.sum(y)
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::MatMul => "matmul",
            Case::Add => "add",
            Case::Mul => "mul",
            Case::AddRow => "add_row",
            Case::Scale => "scale",
            Case::Gelu => "gelu",
            Case::LayerNorm => "layer_norm",
            Case::Embed => "embed",
            Case::SelectRows => "select_rows",
            Case::GatherRows => "gather_rows",
            Case::Attention => "attention",
            Case::Softmax => "softmax",
            Case::CrossEntropy => "cross_entropy",
            Case::Sum => "sum",
            Case::WeightedSum => "weighted_sum",
            Case::Model => "model",
        }
    }

    fn shapes(self) -> Vec<Vec<usize>> {
        match self {
            Case::MatMul => vec![vec![3, 4], vec![4, 2]],
            Case::Add | Case::Mul => vec![vec![3, 4], vec![3, 4]],
            Case::AddRow => vec![vec![3, 4], vec![4]],
            Case::Scale | Case::Gelu | Case::Sum => vec![vec![3, 4]],
            Case::LayerNorm => vec![vec![3, 6], vec![6], vec![6]],
            Case::Embed => vec![vec![4, 3], vec![5, 3]],
            Case::SelectRows => vec![vec![4, 3]],
            Case::GatherRows => vec![vec![3, 2], vec![2, 2]],
            Case::Attention => vec![vec![8, 4], vec![8, 4], vec![8, 4]],
            Case::Softmax | Case::CrossEntropy => vec![vec![4, 5]],
            Case::WeightedSum => vec![vec![2, 2], vec![3]],
            Case::Model => weight_shapes(&model_case_config())
                .named()
                .into_iter()
                .filter(|(n, _)| !is_key_bias(n))
                .map(|(_, s)| s.clone())
                .collect(),
        }
    }

    /// Seeded inputs for this case.
    pub fn params(self, seed: u64) -> Result<Vec<Tensor<f64>>> {
        if self == Case::Model {
            let p = ModelParams::<f64>::init_with_std(&model_case_config(), seed, 0.3)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let jitter = Normal::new(0.0, 0.1).expect("valid std");
            // non-trivial gains and biases
            return Ok(p
                .weights
                .named()
                .into_iter()
                .filter(|(n, _)| !is_key_bias(n))
                .map(|(_, t)| {
                    let data = t.data();
                    Tensor::from_fn(t.shape(), |i| data[i] + jitter.sample(&mut rng))
                })
                .collect());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(self as u64 * 7919));
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        Ok(self
            .shapes()
            .iter()
            .map(|s| Tensor::from_fn(s, |_| normal.sample(&mut rng)))
            .collect())
    }
}

impl Objective for Case {
    fn eval<F: Scalar>(&self, tape: &mut GradTape<F>, p: &[Var]) -> Result<Var> {
        let out = match self {
            Case::MatMul => tape.matmul(p[0], p[1])?,
            Case::Add => tape.add(p[0], p[1])?,
            Case::Mul => tape.mul(p[0], p[1])?,
            Case::AddRow => tape.add_row(p[0], p[1])?,
            Case::Scale => tape.scale(p[0], F::lit(-1.7))?,
            Case::Gelu => tape.gelu(p[0])?,
            Case::LayerNorm => tape.layer_norm(p[0], p[1], p[2])?,
            Case::Embed => {
                let lookups = [(0, 0, 1), (0, 1, 4), (1, 0, 3), (1, 1, 4), (2, 1, 0), (0, 0, 1)]
                    .iter()
                    .map(|&(row, table, index)| Lookup { row, table, index })
                    .collect();
                tape.embed(&[p[0], p[1]], lookups, 3)?
            }
            Case::SelectRows => tape.select_rows(p[0], vec![2, 0, 2, 3])?,
            Case::GatherRows => tape.gather_rows(
                &[p[0], p[1]],
                vec![Some((1, 1)), None, Some((0, 2)), Some((0, 0)), Some((1, 1))],
            )?,
            Case::Attention => {
                let layout = AttnLayout {
                    batch: 2,
                    seq_len: 4,
                    n_heads: 2,
                };
                let full = tape.causal_attention_ragged(p[0], p[1], p[2], layout, vec![4, 3])?;
                let window = tape.causal_attention_window(p[0], p[1], p[2], layout, vec![4, 3], vec![2, 1])?;
                tape.add(full, window)?
            }
            Case::Softmax => tape.softmax(p[0])?,
            Case::CrossEntropy => {
                return tape.softmax_cross_entropy(p[0], &[3, 0, 4, 1], &[true, false, true, true]);
            }
            Case::Sum => {
                let s = tape.sum(p[0])?;
                return tape.scale(s, F::lit(0.5));
            }
            Case::WeightedSum => {
                let a = project(tape, p[0])?;
                let b = project(tape, p[1])?;
                return tape.weighted_sum(&[(a, F::lit(0.3)), (b, F::lit(-1.2))]);
            }
            Case::Model => return model_objective(tape, p),
        };
        project(tape, out)
    }
}

/// Teacher-forced loss plus one free-running iteration over fixed
/// predictions, scaled by `1/B`, as in a hybrid step.
fn model_objective<F: Scalar>(tape: &mut GradTape<F>, p: &[Var]) -> Result<Var> {
    let cfg = model_case_config();
    let names = model_names(&cfg);
    let w: Weights<Var> = weight_shapes(&cfg).map(|name, shape| match names.iter().position(|n| n == name) {
        Some(i) => p[i],
        None => tape.constant(fixed_key_bias(shape)),
    });
    model_loss(tape, &cfg, &w)
}

fn model_loss<F: Scalar>(tape: &mut GradTape<F>, cfg: &ModelConfig, w: &Weights<Var>) -> Result<Var> {
    let tf_in: Vec<SeqInput<'_>> = MODEL_BATCH
        .iter()
        .map(|f| SeqInput {
            prompt: f.0,
            target: f.1,
        })
        .collect();
    let tf = forward_pass(tape, cfg, w, &tf_in, None)?;
    let gt_all: Vec<u32> = MODEL_BATCH.iter().flat_map(|f| f.1.iter().copied()).collect();
    let l_tf = loss_tf(tape, tf.logits.logits, &gt_all)?;

    let spliced: Vec<Vec<u32>> = MODEL_BATCH
        .iter()
        .map(|f| f.1[..f.2].iter().chain(&f.3[f.2..]).copied().collect())
        .collect();
    let fr_in: Vec<SeqInput<'_>> = MODEL_BATCH
        .iter()
        .zip(&spliced)
        .map(|(f, s)| SeqInput { prompt: f.0, target: s })
        .collect();
    let source = [0, 1];
    let shared: Vec<usize> = MODEL_BATCH.iter().map(|f| f.0.len() + f.2 + 1).collect();
    let fr = forward_pass(
        tape,
        cfg,
        w,
        &fr_in,
        Some(PrefixShare {
            cache: &tf,
            source: &source,
            shared: &shared,
        }),
    )?;
    let segments: Vec<FrSegment<'_>> = MODEL_BATCH
        .iter()
        .map(|f| FrSegment {
            y_gt: f.1,
            t1: f.2,
            valid: f.4,
        })
        .collect();
    let l_fr = loss_fr_batch(tape, fr.logits.logits, &segments)?;
    let total = total_loss(tape, l_tf, &[l_fr.total], &LossWeights::uniform(1))?;
    tape.scale(total, F::lit(1.0 / MODEL_BATCH.len() as f64))
}

/// Largest absolute analytic gradient over the model case's key biases,
/// taken with every weight trainable.
pub fn key_bias_gradient<F: Scalar>(seed: u64) -> Result<f64> {
    let cfg = model_case_config();
    let trained = Case::Model.params(seed)?;
    let names = model_names(&cfg);
    let mut tape = GradTape::<F>::new();
    let w: Weights<Var> = weight_shapes(&cfg).map(|name, shape| match names.iter().position(|n| n == name) {
        Some(i) => tape.param(trained[i].cast()),
        None => tape.param(fixed_key_bias(shape)),
    });
    let root = model_loss(&mut tape, &cfg, &w)?;
    let grads = tape.backward(root)?;
    let mut worst = 0.0f64;
    for (name, v) in w.named() {
        if is_key_bias(&name) {
            if let Some(g) = grads.get(*v) {
                for x in g.data() {
                    worst = worst.max(x.to_f64_lossy().abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Options for a full check at `precision`.
pub fn options(precision: Precision) -> GradCheckOptions {
    GradCheckOptions {
        h: H,
        precision,
        max_coords_per_tensor: None,
        floor: match precision {
            Precision::F32 => FLOOR_F32,
            Precision::F64 => DENOM_FLOOR,
        },
        stencil: Stencil::FourPoint,
    }
}

pub fn tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => TOL_F32,
        Precision::F64 => TOL_F64,
    }
}

/// Checks every case and returns one report per case, in [`ALL_CASES`] order.
pub fn run_suite(precision: Precision, seed: u64) -> Result<Vec<(Case, GradCheckReport)>> {
    ALL_CASES
        .iter()
        .map(|&c| Ok((c, grad_check(&c, &c.params(seed)?, options(precision))?)))
        .collect()
}
