//! Tiny decoder-only transformer producing next-token distributions over the
//! speech vocabulary, conditioned on a text prompt.
//!
//! Input layout for one example: `[SOS, x_1..x_P, y_1..y_{T-1}]`. The row at
//! position `P + t - 1` yields the logits for `y_t`, so `y_1` is predicted
//! from the prompt alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{AttnLayout, GradTape, Lookup, Var};
use crate::tensor::{Scalar, Tensor};

/// Reserved speech-vocabulary index of the start-of-sequence marker.
pub const SOS: u32 = 0;
/// Reserved speech-vocabulary index of the end-of-sequence marker.
pub const EOS: u32 = 1;

const TEXT_TABLE: usize = 0;
const SPEECH_TABLE: usize = 1;
const POS_TABLE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub text_vocab: usize,
    pub speech_vocab: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            text_vocab: 16,
            speech_vocab: 64,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!("{} is not divisible by n_heads={}", self.d_model, self.n_heads),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::config("model.n_layers", "must be at least 1"));
        }
        if self.speech_vocab < 3 {
            return Err(Error::config(
                "model.speech_vocab",
                "needs SOS, EOS and at least one content token",
            ));
        }
        if self.text_vocab == 0 {
            return Err(Error::config("model.text_vocab", "must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(Error::config("model.max_len", "must be at least 2"));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Weights of one transformer block, generic over the leaf type so the same
/// structure holds tensors, tape variables, or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub text_emb: T,
    pub speech_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<Block<T>>,
    pub lnf_gamma: T,
    pub lnf_beta: T,
    pub w_out: T,
    pub b_out: T,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1, w2, b2)
    };
}

impl<T> Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        macro_rules! push {
            ($($f:ident),*) => { $( out.push((format!("{prefix}.{}", stringify!($f)), &self.$f)); )* };
        }
        block_fields!(push);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        macro_rules! push {
            ($($f:ident),*) => { $( out.push(&mut self.$f); )* };
        }
        block_fields!(push);
    }

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Block<U>, E> {
        macro_rules! build {
            ($($f:ident),*) => {
                Block { $( $f: f(&format!("{prefix}.{}", stringify!($f)), &self.$f)?, )* }
            };
        }
        Ok(block_fields!(build))
    }
}

impl<T> Weights<T> {
    /// All leaves with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("text_emb".to_string(), &self.text_emb),
            ("speech_emb".to_string(), &self.speech_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), &mut out);
        }
        out.push(("lnf_gamma".to_string(), &self.lnf_gamma));
        out.push(("lnf_beta".to_string(), &self.lnf_beta));
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    /// Mutable leaves in the same order as [`Weights::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.text_emb, &mut self.speech_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            b.visit_mut(&mut out);
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<Weights<U>, E> {
        Ok(Weights {
            text_emb: f("text_emb", &self.text_emb)?,
            speech_emb: f("speech_emb", &self.speech_emb)?,
            pos_emb: f("pos_emb", &self.pos_emb)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), &mut f))
                .collect::<Result<_, E>>()?,
            lnf_gamma: f("lnf_gamma", &self.lnf_gamma)?,
            lnf_beta: f("lnf_beta", &self.lnf_beta)?,
            w_out: f("w_out", &self.w_out)?,
            b_out: f("b_out", &self.b_out)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        self.try_map::<U, std::convert::Infallible>(|n, t| Ok(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }
}

/// Shapes of every weight for a configuration.
pub fn weight_shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    let d = cfg.d_model;
    let ff = cfg.d_ff();
    let block = Block {
        ln1_gamma: vec![d],
        ln1_beta: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln2_gamma: vec![d],
        ln2_beta: vec![d],
        w1: vec![d, ff],
        b1: vec![ff],
        w2: vec![ff, d],
        b2: vec![d],
    };
    Weights {
        text_emb: vec![cfg.text_vocab, d],
        speech_emb: vec![cfg.speech_vocab, d],
        pos_emb: vec![cfg.max_len, d],
        blocks: vec![block; cfg.n_layers],
        lnf_gamma: vec![d],
        lnf_beta: vec![d],
        w_out: vec![d, cfg.speech_vocab],
        b_out: vec![cfg.speech_vocab],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Scalar = f32> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<F>>,
}

fn is_gain(name: &str) -> bool {
    name.ends_with("gamma")
}

fn is_bias(name: &str) -> bool {
    name.ends_with("beta") || name.rsplit('.').next().is_some_and(|f| f.starts_with('b')) || name == "b_out"
}

impl<F: Scalar> ModelParams<F> {
    /// Seeded Gaussian init (std 0.02) for matrices and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::config("init.std", e.to_string()))?;
        let weights = weight_shapes(config).map(|name, shape| {
            if is_gain(name) {
                Tensor::full(shape, F::one())
            } else if is_bias(name) {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| F::lit(normal.sample(&mut rng)))
            }
        });
        Ok(ModelParams {
            config: config.clone(),
            weights,
        })
    }

    /// Every weight zero, including layer-norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            config: config.clone(),
            weights: weight_shapes(config).map(|_, s| Tensor::zeros(s)),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            weights: self.weights.map(|_, t| t.cast()),
        }
    }

    /// Registers every weight on `tape`, as trainable leaves or constants.
    pub fn register(&self, tape: &mut GradTape<F>, trainable: bool) -> Weights<Var> {
        self.weights.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// One sequence to run through the model: a prompt and the target tokens
/// whose logits are wanted. Only `target[..len-1]` is fed as input.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub prompt: &'a [u32],
    pub target: &'a [u32],
}

/// Output of a batched forward pass: logits rows for every example's target
/// positions, concatenated in batch order.
#[derive(Clone, Debug)]
pub struct BatchLogits {
    pub logits: Var,
    /// `offsets[b]..offsets[b+1]` are example `b`'s rows.
    pub offsets: Vec<usize>,
}

impl BatchLogits {
    pub fn rows_of(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }
}

/// Total positions an example occupies: SOS, prompt, and all but the last
/// target token.
pub fn input_len(prompt_len: usize, target_len: usize) -> usize {
    1 + prompt_len + target_len.saturating_sub(1)
}

pub fn check_length(cfg: &ModelConfig, prompt_len: usize, target_len: usize) -> Result<()> {
    let len = 1 + prompt_len + target_len;
    if len > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len,
            max_len: cfg.max_len,
        });
    }
    Ok(())
}

fn linear<F: Scalar>(tape: &mut GradTape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Per-layer attention inputs and output logits of a recorded pass, in the
/// pass's padded `[batch*seq_len, d]` layout. A later pass can reuse the
/// rows of any prefix whose input tokens match.
#[derive(Clone, Debug)]
pub struct PassCache {
    pub seq_len: usize,
    pub qkv: Vec<[Var; 3]>,
    pub logits: BatchLogits,
}

/// Prefix reuse for a pass: item `b` continues example `source[b]` of the
/// cached pass and its first `shared[b]` input positions are identical to
/// that example's.
#[derive(Clone, Copy, Debug)]
pub struct PrefixShare<'a> {
    pub cache: &'a PassCache,
    pub source: &'a [usize],
    pub shared: &'a [usize],
}

fn check_batch(cfg: &ModelConfig, batch: &[SeqInput<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("forward pass over an empty batch"));
    }
    for item in batch {
        check_length(cfg, item.prompt.len(), item.target.len())?;
        if item.target.is_empty() {
            return Err(Error::contract("forward pass needs at least one target position"));
        }
        if let Some(&t) = item.prompt.iter().find(|&&t| t as usize >= cfg.text_vocab) {
            return Err(Error::IndexOutOfRange {
                what: "text vocabulary",
                index: t as usize,
                size: cfg.text_vocab,
            });
        }
        if let Some(&t) = item.target.iter().find(|&&t| t as usize >= cfg.speech_vocab) {
            return Err(Error::IndexOutOfRange {
                what: "speech vocabulary",
                index: t as usize,
                size: cfg.speech_vocab,
            });
        }
    }
    Ok(())
}

fn input_token(item: &SeqInput<'_>, pos: usize) -> (usize, u32) {
    let p = item.prompt.len();
    if pos == 0 {
        (SPEECH_TABLE, SOS)
    } else if pos <= p {
        (TEXT_TABLE, item.prompt[pos - 1])
    } else {
        (SPEECH_TABLE, item.target[pos - p - 1])
    }
}

/// Batched forward pass on `tape`.
pub fn forward_batch<F: Scalar>(
    tape: &mut GradTape<F>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    batch: &[SeqInput<'_>],
) -> Result<BatchLogits> {
    Ok(forward_pass(tape, cfg, w, batch, None)?.logits)
}

/// Batched forward pass that records a [`PassCache`] and, given a
/// [`PrefixShare`], computes only the rows after each item's shared prefix.
/// The result equals a full pass over the same inputs.
pub fn forward_pass<F: Scalar>(
    tape: &mut GradTape<F>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    batch: &[SeqInput<'_>],
    share: Option<PrefixShare<'_>>,
) -> Result<PassCache> {
    check_batch(cfg, batch)?;
    let lens: Vec<usize> = batch
        .iter()
        .map(|it| input_len(it.prompt.len(), it.target.len()))
        .collect();
    let seq_len = lens.iter().copied().max().unwrap_or(1);
    let starts: Vec<usize> = match share {
        None => vec![0; batch.len()],
        Some(sh) => {
            if sh.source.len() != batch.len() || sh.shared.len() != batch.len() {
                return Err(Error::contract("prefix share needs one source and length per item"));
            }
            let n_src = sh.cache.logits.offsets.len() - 1;
            if let Some(&s) = sh.source.iter().find(|&&s| s >= n_src) {
                return Err(Error::IndexOutOfRange {
                    what: "prefix share source",
                    index: s,
                    size: n_src,
                });
            }
            sh.shared
                .iter()
                .zip(&lens)
                .map(|(&s, &l)| s.min(l).min(sh.cache.seq_len))
                .collect()
        }
    };

    // real rows computed by this pass; padding rows are never computed
    let mut computed: Vec<(usize, usize)> = Vec::new();
    for (b, (&s, &l)) in starts.iter().zip(&lens).enumerate() {
        computed.extend((s..l).map(|p| (b, p)));
    }
    let mut computed_index = vec![usize::MAX; batch.len() * seq_len];
    for (i, &(b, p)) in computed.iter().enumerate() {
        computed_index[b * seq_len + p] = i;
    }

    let mut lookups = Vec::new();
    for (row, &(b, pos)) in computed.iter().enumerate() {
        let (table, tok) = input_token(&batch[b], pos);
        lookups.push(Lookup {
            row,
            table,
            index: tok as usize,
        });
        lookups.push(Lookup {
            row,
            table: POS_TABLE,
            index: pos,
        });
    }

    let layout = AttnLayout {
        batch: batch.len(),
        seq_len,
        n_heads: cfg.n_heads,
    };
    let mut qkv = Vec::with_capacity(w.blocks.len());
    let mut logits_rows: Vec<Option<(usize, usize)>> = Vec::new();
    let mut offsets = vec![0];
    let mut out_rows = Vec::new();
    for (b, item) in batch.iter().enumerate() {
        let p = item.prompt.len();
        for t in 0..item.target.len() {
            let pos = p + t;
            if pos < starts[b] {
                let sh = share.expect("positive start implies sharing");
                let src = sh.source[b];
                logits_rows.push(Some((0, sh.cache.logits.offsets[src] + t)));
            } else {
                logits_rows.push(Some((1, out_rows.len())));
                out_rows.push(computed_index[b * seq_len + pos]);
            }
        }
        offsets.push(logits_rows.len());
    }

    if computed.is_empty() {
        let sh = share.expect("an unshared pass computes every row");
        let logits = tape.gather_rows(&[sh.cache.logits.logits], logits_rows)?;
        return Ok(PassCache {
            seq_len,
            qkv: sh.cache.qkv.clone(),
            logits: BatchLogits { logits, offsets },
        });
    }

    // padded-layout assembly: cached rows come from source 0, own rows from
    // the last source
    let own_src = usize::from(share.is_some());
    let picks = |cache_rows: Option<(usize, &[usize])>| -> Vec<Option<(usize, usize)>> {
        (0..batch.len())
            .flat_map(|b| (0..seq_len).map(move |p| (b, p)))
            .map(|(b, p)| {
                if p < starts[b] {
                    cache_rows.map(|(l, src)| (0, src[b] * l + p))
                } else if p < lens[b] {
                    Some((own_src, computed_index[b * seq_len + p]))
                } else {
                    None
                }
            })
            .collect()
    };
    let back: Vec<usize> = computed.iter().map(|&(b, p)| b * seq_len + p).collect();

    let mut h = tape.embed(&[w.text_emb, w.speech_emb, w.pos_emb], lookups, computed.len())?;
    for (li, blk) in w.blocks.iter().enumerate() {
        let a = tape.layer_norm(h, blk.ln1_gamma, blk.ln1_beta)?;
        let q = linear(tape, a, blk.wq, blk.bq)?;
        let k = linear(tape, a, blk.wk, blk.bk)?;
        let v = linear(tape, a, blk.wv, blk.bv)?;
        let mut full = [q, k, v];
        match share {
            None => {
                let pk = picks(None);
                for slot in full.iter_mut() {
                    *slot = tape.gather_rows(&[*slot], pk.clone())?;
                }
            }
            Some(sh) => {
                let pk = picks(Some((sh.cache.seq_len, sh.source)));
                for (slot, &c) in full.iter_mut().zip(&sh.cache.qkv[li]) {
                    *slot = tape.gather_rows(&[c, *slot], pk.clone())?;
                }
            }
        }
        qkv.push(full);
        let att = tape.causal_attention_window(full[0], full[1], full[2], layout, lens.clone(), starts.clone())?;
        let att = tape.select_rows(att, back.clone())?;
        let o = linear(tape, att, blk.wo, blk.bo)?;
        h = tape.add(h, o)?;
        let m = tape.layer_norm(h, blk.ln2_gamma, blk.ln2_beta)?;
        let f = linear(tape, m, blk.w1, blk.b1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, blk.w2, blk.b2)?;
        h = tape.add(h, f)?;
    }
    let hf = tape.layer_norm(h, w.lnf_gamma, w.lnf_beta)?;
    let sel = tape.select_rows(hf, out_rows)?;
    let own = linear(tape, sel, w.w_out, w.b_out)?;
    let logits = match share {
        None => own,
        Some(sh) => tape.gather_rows(&[sh.cache.logits.logits, own], logits_rows)?,
    };
    Ok(PassCache {
        seq_len,
        qkv,
        logits: BatchLogits { logits, offsets },
    })
}

/// Logits `[len(target), speech_vocab]` for one example, computed without
/// gradient tracking. Row `t` is the distribution of `target[t]` given the
/// prompt and `target[..t]`.
pub fn forward_logits<F: Scalar>(params: &ModelParams<F>, prompt: &[u32], target: &[u32]) -> Result<Tensor<F>> {
    let mut tape = GradTape::new();
    let w = params.register(&mut tape, false);
    let out = forward_batch(&mut tape, &params.config, &w, &[SeqInput { prompt, target }])?;
    Ok(tape.value(out.logits).clone())
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<u32> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}


/// A conditioning prompt plus its ground-truth target, which ends in EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceExample {
    /// Text-vocabulary tokens (text symbols, then an optional speaker token).
    /// The model prepends SOS itself.
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
    /// Target positions modeled by free-running iterations (`T` unless truncated).
    pub t2: usize,
}

impl SequenceExample {
    pub fn new(prompt: Vec<u32>, target: Vec<u32>) -> Self {
        let t2 = target.len();
        SequenceExample { prompt, target, t2 }
    }

    /// Target length including EOS.
    pub fn t(&self) -> usize {
        self.target.len()
    }

    /// Zero-based index of the ground-truth EOS.
    pub fn eos_index(&self) -> usize {
        self.target.len() - 1
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let eos_count = self.target.iter().filter(|&&t| t == EOS).count();
        if self.target.last() != Some(&EOS) || eos_count != 1 {
            return Err(Error::contract("target must contain exactly one EOS, at the end"));
        }
        if self.t2 == 0 || self.t2 > self.t() {
            return Err(Error::contract(format!("t2={} outside 1..={}", self.t2, self.t())));
        }
        check_length(cfg, self.prompt.len(), self.t())
    }
}
