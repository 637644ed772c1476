#![allow(dead_code)]

use explab::gradsuite::model_case_config;
use explab::losses::{loss_fr, loss_tf, WeightMode};
use explab::model::{ModelParams, SequenceExample};
use explab::tensor::Tensor;
use explab::trainer::{build_step_graph, StepPlan};
use explab::GradTape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// `-log softmax(row)[y]` with a max shift and compensated normalizer.
pub fn ce_oracle_row(row: &[f64], y: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = compensated_sum(row.iter().map(|&x| (x - m).exp()));
    -(row[y] - m) + z.ln()
}

/// Masked per-position cross-entropy sum.
pub fn ce_oracle(logits: &[f64], v: usize, y: &[u32], mask: impl Fn(usize) -> bool) -> f64 {
    compensated_sum(
        (0..y.len())
            .filter(|&i| mask(i))
            .map(|i| ce_oracle_row(&logits[i * v..(i + 1) * v], y[i] as usize)),
    )
}

#[derive(Clone, Debug)]
pub struct LossInstance {
    pub v: usize,
    pub logits: Vec<f64>,
    pub y: Vec<u32>,
    pub t1: usize,
    pub valid: Vec<bool>,
}

impl LossInstance {
    pub fn random(rng: &mut impl Rng, max_t: usize, max_v: usize) -> Self {
        let t = rng.gen_range(1..=max_t);
        let v = rng.gen_range(2..=max_v);
        let scale = rng.gen_range(0.1..6.0);
        let logits = (0..t * v).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let y = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
        let t1 = rng.gen_range(0..=t);
        let valid = (0..t).map(|_| rng.gen_bool(0.7)).collect();
        LossInstance { v, logits, y, t1, valid }
    }

    pub fn t(&self) -> usize {
        self.y.len()
    }
}

/// Largest absolute deviation of `loss_tf` and the `loss_fr` terms from the
/// oracle for one instance, and whether `loss_fr(t1 = T2)` equals `loss_tf`
/// bit for bit.
pub fn loss_deviation(inst: &LossInstance) -> (f64, bool) {
    let t = inst.t();
    let mut tape = GradTape::<f64>::new();
    let l = tape.constant(Tensor::new(vec![t, inst.v], inst.logits.clone()).unwrap());
    let tf = loss_tf(&mut tape, l, &inst.y).unwrap();
    let fr = loss_fr(&mut tape, l, &inst.y, inst.t1, &inst.valid).unwrap();
    let full = loss_fr(&mut tape, l, &inst.y, t, &inst.valid).unwrap();

    let o_tf = ce_oracle(&inst.logits, inst.v, &inst.y, |_| true);
    let o1 = ce_oracle(&inst.logits, inst.v, &inst.y, |i| i < inst.t1);
    let o2 = ce_oracle(&inst.logits, inst.v, &inst.y, |i| i >= inst.t1 && inst.valid[i]);
    let dev = [
        (tape.value(tf).item() - o_tf).abs(),
        (tape.value(fr.term1).item() - o1).abs(),
        (tape.value(fr.term2).item() - o2).abs(),
        (tape.value(fr.total).item() - (o1 + o2)).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let identity = tape.value(full.total).item().to_bits() == tape.value(tf).item().to_bits();
    (dev, identity)
}

/// Runs `n` seeded random instances; returns the worst deviation and whether
/// every degenerate identity held exactly.
pub fn loss_oracle_sweep(seed: u64, n: usize) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut identities = true;
    for _ in 0..n {
        let (d, ok) = loss_deviation(&LossInstance::random(&mut rng, 32, 16));
        worst = worst.max(d);
        identities &= ok;
    }
    (worst, identities)
}

fn tiny_batch() -> Vec<SequenceExample> {
    vec![
        SequenceExample::new(vec![2, 3, 4], vec![2, 4, 3, 5, 4, 1]),
        SequenceExample::new(vec![3, 2], vec![5, 2, 3, 1]),
        SequenceExample::new(vec![4], vec![3, 3, 1]),
    ]
}

/// Flattened parameter gradient of one hybrid step graph with two
/// free-running iterations weighted `w`.
fn step_gradient(params: &ModelParams<f64>, batch: &[SequenceExample], w: [f64; 2]) -> Vec<f64> {
    let mut tape = GradTape::<f64>::new();
    let vars = params.register(&mut tape, true);
    let refs: Vec<&SequenceExample> = batch.iter().collect();
    let plan = StepPlan {
        budget: 2,
        t1: vec![1, 2, 0],
        eos_adaptive: false,
        eos_tolerance: 2,
        weights: WeightMode::Custom {
            weights: w.to_vec(),
            normalize: false,
        },
        decode: Default::default(),
        rng_seed: 0,
        share_prefix: true,
    };
    let graph = build_step_graph(&mut tape, &params.config, &vars, &refs, &plan).unwrap();
    assert_eq!(graph.report.n_executed, 2);
    let grads = tape.backward(graph.total).unwrap();
    vars.named()
        .into_iter()
        .flat_map(|(_, v)| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_default())
        .collect()
}

/// Worst relative deviation, over both iterations and several factors `c`,
/// between the gradient contribution of iteration `n` at weight `c·w_n` and
/// `c` times its contribution at `w_n`. Contributions are differences
/// against the same step with `w_n = 0`, each from its own backward pass.
pub fn linearity_error(seed: u64) -> f64 {
    let params = ModelParams::<f64>::init_with_std(&model_case_config(), seed, 0.3).unwrap();
    let batch = tiny_batch();
    let base = [0.7, 0.45];
    let mut worst = 0.0f64;
    for n in 0..2 {
        let mut zero = base;
        zero[n] = 0.0;
        let g0 = step_gradient(&params, &batch, zero);
        let g1 = step_gradient(&params, &batch, base);
        let contrib: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let scale = contrib.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(scale > 0.0);
        for c in [0.5, 2.0, 3.7] {
            let mut scaled = base;
            scaled[n] *= c;
            let gc = step_gradient(&params, &batch, scaled);
            for ((a, b), k) in gc.iter().zip(&g0).zip(&contrib) {
                let got = a - b;
                let want = c * k;
                // elementwise, with a floor far below the contribution scale
                let err = (got - want).abs() / (got.abs() + want.abs()).max(1e-9 * scale);
                worst = worst.max(err);
            }
        }
    }
    worst
}
