//! Explicit, per-step reverse-mode gradient tape.
//!
//! Operations are evaluated eagerly and appended to the tape, so node ids are
//! topologically ordered by construction. A tape admits exactly one backward
//! traversal; a second call fails with [`Error::TapeConsumed`].

use std::sync::atomic::{AtomicU32, Ordering};

pub use crate::kernels::AttnLayout;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// One embedding lookup: output row `row` accumulates `tables[table][index]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub row: usize,
    pub table: usize,
    pub index: usize,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embed {
        tables: Vec<Var>,
        lookups: Vec<Lookup>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherRows {
        sources: Vec<Var>,
        picks: Vec<Option<(usize, usize)>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        lens: Vec<usize>,
        starts: Vec<usize>,
        probs: Vec<F>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, F)>),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embed { tables, .. } => tables.clone(),
            Op::SelectRows { x, .. } => vec![*x],
            Op::GatherRows { sources, .. } => sources.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    segment: u32,
}

pub struct GradTape<F: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<F>>,
    segment: u32,
    backward_count: usize,
}

/// Gradients produced by one backward traversal, indexed by tape variable.
pub struct Gradients<F: Scalar = f32> {
    tape: u32,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn matrix_dims<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::contract(format!("{op} expects a 2-D tensor, got {s:?}"))),
    }
}

impl<F: Scalar> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GradTape<F> {
    pub fn new() -> Self {
        GradTape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            segment: 0,
            backward_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn backward_count(&self) -> usize {
        self.backward_count
    }

    /// Tags subsequently recorded nodes with `segment`. Used to audit that
    /// separate forward passes share no edges except through leaves.
    pub fn begin_segment(&mut self, segment: u32) {
        self.segment = segment;
    }

    pub fn segment_of(&self, v: Var) -> u32 {
        self.nodes[v.index()].segment
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.index()].op, Op::Leaf)
    }

    /// All `(input, output)` edges recorded on the tape.
    pub fn edges(&self) -> Vec<(Var, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| {
                let out = self.var(i);
                n.op.inputs().into_iter().map(move |inp| (inp, out))
            })
            .collect()
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<F>> {
        if v.tape != self.id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        Ok(&self.nodes[v.index()])
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index()].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let needs_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.index()].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            segment: self.segment,
        });
        self.var(self.nodes.len() - 1)
    }

    /// A trainable leaf; its gradient is reported by backward.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k) = matrix_dims(ta, "matmul")?;
        let (k2, n) = matrix_dims(tb, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(bias)?.value);
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(shape_err("add_row", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % cols])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let data = ta.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let data = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Gelu(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (tg, tb) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let cols = tx.cols();
        if tg.len() != cols || tb.len() != cols {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm(tx.data(), tg.data(), tb.data(), cols);
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Sum-of-lookups embedding: `rows × d` output where each [`Lookup`] adds
    /// one table row into one output row. Rows without lookups stay zero.
    pub fn embed(&mut self, tables: &[Var], lookups: Vec<Lookup>, rows: usize) -> Result<Var> {
        let mut d = None;
        for &t in tables {
            let c = self.node(t)?.value.cols();
            if *d.get_or_insert(c) != c {
                return Err(Error::contract("embedding tables differ in width"));
            }
        }
        let d = d.ok_or_else(|| Error::contract("embed needs at least one table"))?;
        let mut out = vec![F::zero(); rows * d];
        for lk in &lookups {
            let table = tables.get(lk.table).ok_or(Error::IndexOutOfRange {
                what: "embedding table list",
                index: lk.table,
                size: tables.len(),
            })?;
            let tv = &self.nodes[table.index()].value;
            if lk.index >= tv.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: lk.index,
                    size: tv.rows(),
                });
            }
            if lk.row >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "embedding output",
                    index: lk.row,
                    size: rows,
                });
            }
            kernels::axpy(F::one(), tv.row(lk.index), &mut out[lk.row * d..(lk.row + 1) * d]);
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::Embed {
                tables: tables.to_vec(),
                lookups,
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let cols = tx.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            if r >= tx.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "select_rows",
                    index: r,
                    size: tx.rows(),
                });
            }
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), cols], out)?;
        Ok(self.push(t, Op::SelectRows { x, rows }))
    }

    /// Assembles a matrix row by row from several sources of equal width.
    /// `picks[i]` names `(source, row)` for output row `i`; `None` yields a
    /// zero row.
    pub fn gather_rows(&mut self, sources: &[Var], picks: Vec<Option<(usize, usize)>>) -> Result<Var> {
        let mut cols = None;
        for &s in sources {
            let c = self.node(s)?.value.cols();
            if *cols.get_or_insert(c) != c {
                return Err(Error::contract("gather_rows sources differ in width"));
            }
        }
        let cols = cols.ok_or_else(|| Error::contract("gather_rows needs at least one source"))?;
        let mut out = vec![F::zero(); picks.len() * cols];
        for (i, pick) in picks.iter().enumerate() {
            let Some((src, row)) = *pick else { continue };
            let sv = sources.get(src).ok_or(Error::IndexOutOfRange {
                what: "gather_rows source",
                index: src,
                size: sources.len(),
            })?;
            let tv = &self.nodes[sv.index()].value;
            if row >= tv.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: row,
                    size: tv.rows(),
                });
            }
            out[i * cols..(i + 1) * cols].copy_from_slice(tv.row(row));
        }
        let t = Tensor::new(vec![picks.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                sources: sources.to_vec(),
                picks,
            },
        ))
    }

    /// Causal multi-head self-attention over a right-padded batch laid out as
    /// `[batch*seq_len, d]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        self.causal_attention_ragged(q, k, v, layout, vec![layout.seq_len; layout.batch])
    }

    /// [`causal_attention`](Self::causal_attention) where example `b` has
    /// only `lens[b]` real rows; padding rows produce zeros and receive no
    /// gradient.
    pub fn causal_attention_ragged(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        lens: Vec<usize>,
    ) -> Result<Var> {
        let starts = vec![0; lens.len()];
        self.causal_attention_window(q, k, v, layout, lens, starts)
    }

    /// [`causal_attention_ragged`](Self::causal_attention_ragged) that only
    /// computes query rows `starts[b]..lens[b]` of example `b`. Earlier rows
    /// come out zero and their queries receive no gradient; their keys and
    /// values are attended to as usual.
    pub fn causal_attention_window(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        lens: Vec<usize>,
        starts: Vec<usize>,
    ) -> Result<Var> {
        if lens.len() != layout.batch || starts.len() != layout.batch {
            return Err(Error::contract(format!(
                "{} lengths and {} starts for a batch of {}",
                lens.len(),
                starts.len(),
                layout.batch
            )));
        }
        let (tq, tk, tv) = (&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value);
        let (rows, d) = matrix_dims(tq, "causal_attention")?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(shape_err("causal_attention", tq.shape(), tk.shape()));
        }
        if rows != layout.batch * layout.seq_len || layout.n_heads == 0 || d % layout.n_heads != 0 {
            return Err(Error::contract(format!(
                "attention layout {layout:?} incompatible with [{rows}, {d}]"
            )));
        }
        let (out, probs) = kernels::causal_attention(tq.data(), tk.data(), tv.data(), d, layout, &lens, &starts);
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                lens,
                starts,
                probs,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let cols = tx.cols();
        let mut out = vec![F::zero(); tx.len()];
        for (r, o) in out.chunks_mut(cols).enumerate() {
            kernels::softmax_row(tx.row(r), o);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Sum over unmasked rows of `-log softmax(logits_r)[targets_r]`.
    /// Masked rows contribute exactly zero value and zero gradient; their
    /// targets are not inspected.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = &self.node(logits)?.value;
        let (rows, v) = matrix_dims(tl, "softmax_cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::contract(format!(
                "cross entropy over {rows} rows got {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if v < 2 {
            return Err(Error::contract("cross entropy needs at least 2 classes"));
        }
        let mut probs = vec![F::zero(); rows * v];
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "cross-entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = tl.row(r);
            total = total + (kernels::log_sum_exp(row) - row[t]);
            kernels::softmax_row(row, &mut probs[r * v..(r + 1) * v]);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// `Σ c_i · x_i` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let mut s = F::zero();
        for &(v, c) in terms {
            let t = &self.node(v)?.value;
            if !t.is_scalar() {
                return Err(Error::contract(format!(
                    "weighted_sum term has shape {:?}",
                    t.shape()
                )));
            }
            s = s + c * t.item();
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse traversal from a scalar root. Allowed once per tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<F>> {
        if self.backward_count > 0 {
            return Err(Error::TapeConsumed);
        }
        let rv = &self.node(root)?.value;
        if !rv.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        rv.check_finite("backward root")?;
        self.backward_count += 1;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[root.index()] = Some(vec![F::one()]);

        for idx in (0..=root.index()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.needs_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, delta: Vec<F>) {
        if !self.nodes[v.index()].needs_grad {
            return;
        }
        match &mut grads[v.index()] {
            Some(g) => kernels::axpy(F::one(), &delta, g),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.index()].value;
        let wants = |v: Var| self.nodes[v.index()].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let da = kernels::matmul_grad_lhs(g, tb.data(), m, k, n);
                    self.accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let db = kernels::matmul_grad_rhs(ta.data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if wants(*bias) {
                    let cols = val(*bias).len();
                    let mut db = vec![F::zero(); cols];
                    for row in g.chunks(cols) {
                        kernels::axpy(F::one(), row, &mut db);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let da = g.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let db = g.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let da = g.iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&x, &y)| x * kernels::gelu_grad(y))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = val(*gamma);
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, tg.data(), tg.len());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Embed { tables, lookups } => {
                let d = node.value.cols();
                let mut per_table: Vec<Option<Vec<F>>> = tables
                    .iter()
                    .map(|&t| wants(t).then(|| vec![F::zero(); val(t).len()]))
                    .collect();
                for lk in lookups {
                    if let Some(buf) = &mut per_table[lk.table] {
                        kernels::axpy(
                            F::one(),
                            &g[lk.row * d..(lk.row + 1) * d],
                            &mut buf[lk.index * d..(lk.index + 1) * d],
                        );
                    }
                }
                for (t, buf) in tables.iter().zip(per_table) {
                    if let Some(buf) = buf {
                        self.accumulate(grads, *t, buf);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let tx = val(*x);
                let cols = tx.cols();
                let mut dx = vec![F::zero(); tx.len()];
                for (i, &r) in rows.iter().enumerate() {
                    kernels::axpy(
                        F::one(),
                        &g[i * cols..(i + 1) * cols],
                        &mut dx[r * cols..(r + 1) * cols],
                    );
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { sources, picks } => {
                for (si, &src) in sources.iter().enumerate() {
                    if !wants(src) {
                        continue;
                    }
                    let ts = val(src);
                    let cols = ts.cols();
                    let mut ds = vec![F::zero(); ts.len()];
                    for (i, pick) in picks.iter().enumerate() {
                        if let Some((s, r)) = *pick {
                            if s == si {
                                kernels::axpy(
                                    F::one(),
                                    &g[i * cols..(i + 1) * cols],
                                    &mut ds[r * cols..(r + 1) * cols],
                                );
                            }
                        }
                    }
                    self.accumulate(grads, src, ds);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                lens,
                starts,
                probs,
            } => {
                let d = val(*q).cols();
                let (dq, dk, dv) = kernels::causal_attention_backward(
                    g,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    d,
                    *layout,
                    lens,
                    starts,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &g[r * cols..(r + 1) * cols]);
                    let s = kernels::dot(yr, gr);
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let v = val(*logits).cols();
                let mut dl = vec![F::zero(); probs.len()];
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for c in 0..v {
                        dl[r * v + c] = g[0] * probs[r * v + c];
                    }
                    dl[r * v + targets[r]] = dl[r * v + targets[r]] - g[0];
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(t, c) in terms {
                    self.accumulate(grads, t, vec![g[0] * c]);
                }
            }
        }
    }
}
