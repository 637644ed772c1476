//! Teacher-forced predictions and free-running (autoregressive) decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{argmax, argmax_rows, forward_logits, ModelParams, SequenceExample, EOS, SOS};
use crate::par;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    Greedy,
    /// Seeded categorical sampling from `softmax(logits / temperature)`.
    /// A temperature of zero is greedy.
    Sample { temperature: f64, seed: u64 },
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::Greedy
    }
}

/// Draws one token from a logits row. `rng` is only consumed when sampling.
pub fn pick_token<F: Scalar>(row: &[F], mode: DecodeMode, rng: &mut ChaCha8Rng) -> u32 {
    match mode {
        DecodeMode::Greedy => argmax(row),
        DecodeMode::Sample { temperature, .. } if temperature <= 0.0 => argmax(row),
        DecodeMode::Sample { temperature, .. } => {
            let scaled: Vec<f64> = row.iter().map(|x| x.to_f64_lossy() / temperature).collect();
            let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scaled.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * z;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return i as u32;
                }
                u -= wi;
            }
            // rounding left `u` past the end: fall back to the mode
            argmax(row)
        }
    }
}

/// Incremental inference state: per-layer key/value caches so each new
/// position costs one row of work instead of a full forward pass. Produces
/// the same logits as [`forward_logits`] row for row.
pub struct KvDecoder<'a, F: Scalar> {
    params: &'a ModelParams<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    pos: usize,
}

impl<'a, F: Scalar> KvDecoder<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Self {
        let n = params.config.n_layers;
        KvDecoder {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn linear(x: &[F], w: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
        let (k, n) = (w.rows(), w.cols());
        let mut y = kernels::matmul(x, w.data(), 1, k, n);
        for (o, &bv) in y.iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
        y
    }

    /// Feeds one token (text table when `text` is set, speech otherwise) and
    /// returns the output logits at that position.
    pub fn push(&mut self, token: u32, text: bool) -> Result<Vec<F>> {
        let cfg = &self.params.config;
        let w = &self.params.weights;
        let (table, vocab, what) = if text {
            (&w.text_emb, cfg.text_vocab, "text vocabulary")
        } else {
            (&w.speech_emb, cfg.speech_vocab, "speech vocabulary")
        };
        if token as usize >= vocab {
            return Err(Error::IndexOutOfRange {
                what,
                index: token as usize,
                size: vocab,
            });
        }
        if self.pos >= cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                max_len: cfg.max_len,
            });
        }
        let d = cfg.d_model;
        let h = cfg.n_heads;
        let dh = d / h;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut x: Vec<F> = table
            .row(token as usize)
            .iter()
            .zip(w.pos_emb.row(self.pos))
            .map(|(&a, &b)| a + b)
            .collect();
        let len = self.pos + 1;
        for (li, blk) in w.blocks.iter().enumerate() {
            let (a, _, _) = kernels::layer_norm(&x, blk.ln1_gamma.data(), blk.ln1_beta.data(), d);
            let q = Self::linear(&a, &blk.wq, &blk.bq);
            let k = Self::linear(&a, &blk.wk, &blk.bk);
            let v = Self::linear(&a, &blk.wv, &blk.bv);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (ks, vs) = (&self.keys[li], &self.values[li]);
            let mut att = vec![F::zero(); d];
            let mut scores = vec![F::zero(); len];
            for head in 0..h {
                let co = head * dh;
                let qi = &q[co..co + dh];
                let mut mx = F::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(qi, &ks[j * d + co..j * d + co + dh]) * scale;
                    mx = mx.max(*s);
                }
                let mut z = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z = z + *s;
                }
                let orow = &mut att[co..co + dh];
                for (j, &s) in scores.iter().enumerate() {
                    kernels::axpy(s / z, &vs[j * d + co..j * d + co + dh], orow);
                }
            }
            let o = Self::linear(&att, &blk.wo, &blk.bo);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi = *xi + *oi;
            }
            let (m, _, _) = kernels::layer_norm(&x, blk.ln2_gamma.data(), blk.ln2_beta.data(), d);
            let f: Vec<F> = Self::linear(&m, &blk.w1, &blk.b1)
                .into_iter()
                .map(kernels::gelu)
                .collect();
            let f = Self::linear(&f, &blk.w2, &blk.b2);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi = *xi + *fi;
            }
        }
        let (hf, _, _) = kernels::layer_norm(&x, w.lnf_gamma.data(), w.lnf_beta.data(), d);
        self.pos += 1;
        Ok(Self::linear(&hf, &w.w_out, &w.b_out))
    }

    /// Feeds SOS and the prompt; returns the logits for the first target token.
    pub fn start(&mut self, prompt: &[u32]) -> Result<Vec<F>> {
        let mut last = self.push(SOS, false)?;
        for &t in prompt {
            last = self.push(t, true)?;
        }
        Ok(last)
    }
}

/// Autoregressive decode from the prompt alone. Stops after emitting EOS or
/// after `max_steps` tokens; the output includes EOS when produced.
pub fn free_run_decode<F: Scalar>(
    params: &ModelParams<F>,
    prompt: &[u32],
    max_steps: usize,
    mode: DecodeMode,
) -> Result<Vec<u32>> {
    let cfg = &params.config;
    if 1 + prompt.len() + max_steps > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: 1 + prompt.len() + max_steps,
            max_len: cfg.max_len,
        });
    }
    let seed = match mode {
        DecodeMode::Sample { seed, .. } => seed,
        DecodeMode::Greedy => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<u32> = Vec::with_capacity(max_steps);
    let mut dec = KvDecoder::new(params);
    let mut logits = dec.start(prompt)?;
    while out.len() < max_steps {
        let tok = pick_token(&logits, mode, &mut rng);
        out.push(tok);
        if tok == EOS || out.len() == max_steps {
            break;
        }
        logits = dec.push(tok, false)?;
    }
    Ok(out)
}

/// Argmax predictions with ground-truth prefixes, and the logits behind them.
pub fn teacher_forced_predictions<F: Scalar>(
    params: &ModelParams<F>,
    example: &SequenceExample,
) -> Result<(Vec<u32>, Tensor<F>)> {
    let logits = forward_logits(params, &example.prompt, &example.target)?;
    Ok((argmax_rows(&logits), logits))
}

/// Decode budget used by evaluation: twice the ground-truth length, capped
/// by the model's positional range.
pub fn eval_decode_cap(params_max_len: usize, example: &SequenceExample) -> usize {
    (2 * example.t()).min(params_max_len.saturating_sub(1 + example.prompt.len()))
}

/// Greedy free-running decodes for many examples, evaluated in parallel.
pub fn free_run_batch<F: Scalar>(params: &ModelParams<F>, examples: &[SequenceExample]) -> Result<Vec<Vec<u32>>> {
    par::map(examples, |ex| {
        free_run_decode(
            params,
            &ex.prompt,
            eval_decode_cap(params.config.max_len, ex),
            DecodeMode::Greedy,
        )
    })
    .into_iter()
    .collect()
}

pub fn teacher_forced_batch<F: Scalar>(params: &ModelParams<F>, examples: &[SequenceExample]) -> Result<Vec<Vec<u32>>> {
    par::map(examples, |ex| teacher_forced_predictions(params, ex).map(|(p, _)| p))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            text_vocab: 4,
            speech_vocab: 6,
            max_len: 20,
        }
    }

    #[test]
    fn zero_model_greedy_emits_sos_until_cap() {
        let p = ModelParams::<f32>::zeros(&cfg()).unwrap();
        let out = free_run_decode(&p, &[1, 2], 5, DecodeMode::Greedy).unwrap();
        assert_eq!(out, vec![0; 5]);
        let ex = SequenceExample::new(vec![1], vec![2, 3, EOS]);
        let (pred, logits) = teacher_forced_predictions(&p, &ex).unwrap();
        assert_eq!(pred, vec![0, 0, 0]);
        assert_eq!(logits.shape(), &[3, 6]);
    }

    #[test]
    fn decode_budget_is_checked() {
        let p = ModelParams::<f32>::zeros(&cfg()).unwrap();
        assert!(free_run_decode(&p, &[1, 2], 17, DecodeMode::Greedy).is_ok());
        assert!(matches!(
            free_run_decode(&p, &[1, 2], 18, DecodeMode::Greedy),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let p = ModelParams::<f32>::init_with_std(&cfg(), 4, 1.0).unwrap();
        let mode = DecodeMode::Sample { temperature: 1.0, seed: 77 };
        let a = free_run_decode(&p, &[3], 12, mode).unwrap();
        let b = free_run_decode(&p, &[3], 12, mode).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cold_sampling_matches_greedy() {
        let p = ModelParams::<f32>::init_with_std(&cfg(), 8, 1.0).unwrap();
        let g = free_run_decode(&p, &[0, 3], 15, DecodeMode::Greedy).unwrap();
        for t in [0.0, 1e-4] {
            let s = free_run_decode(&p, &[0, 3], 15, DecodeMode::Sample { temperature: t, seed: 1 }).unwrap();
            assert_eq!(g, s, "temperature {t}");
        }
    }

    #[test]
    fn first_token_agrees_with_teacher_forcing() {
        let p = ModelParams::<f32>::init_with_std(&cfg(), 21, 0.8).unwrap();
        let ex = SequenceExample::new(vec![2, 1], vec![4, 5, 3, EOS]);
        let (tf, _) = teacher_forced_predictions(&p, &ex).unwrap();
        let fr = free_run_decode(&p, &ex.prompt, 4, DecodeMode::Greedy).unwrap();
        assert_eq!(tf[0], fr[0]);
    }

    #[test]
    fn cached_logits_match_full_forward() {
        let c = ModelConfig {
            n_layers: 2,
            ..cfg()
        };
        let p = ModelParams::<f64>::init_with_std(&c, 5, 0.5).unwrap();
        let prompt = [3u32, 0, 2];
        let target = [4u32, 2, 5, 5, EOS];
        let full = forward_logits(&p, &prompt, &target).unwrap();
        let mut dec = KvDecoder::new(&p);
        let mut rows = vec![dec.start(&prompt).unwrap()];
        for &t in &target[..target.len() - 1] {
            rows.push(dec.push(t, false).unwrap());
        }
        for (r, row) in rows.iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(r)) {
                assert!((a - b).abs() < 1e-12, "row {r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cached_greedy_matches_recomputed_greedy() {
        let p = ModelParams::<f32>::init_with_std(&cfg(), 13, 1.0).unwrap();
        let prompt = [1u32, 3];
        let fast = free_run_decode(&p, &prompt, 12, DecodeMode::Greedy).unwrap();
        let mut slow = Vec::new();
        for _ in 0..12 {
            let mut q = slow.clone();
            q.push(0);
            let l = forward_logits(&p, &prompt, &q).unwrap();
            let t = argmax(l.row(l.rows() - 1));
            slow.push(t);
            if t == EOS {
                break;
            }
        }
        assert_eq!(fast, slow);
    }
}
