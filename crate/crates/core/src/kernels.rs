//! Slice-level numeric kernels behind the tape ops. All kernels are
//! deterministic: every output element is produced by a fixed summation order
//! regardless of whether the parallel path is taken.

use crate::par;
use crate::tensor::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, k * n, |i, row| {
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(av, &b[kk * n..(kk + 1) * n], row);
        }
    });
    out
}

/// Gradient w.r.t. the left operand: `dc[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_grad_lhs<F: Scalar>(dc: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    par::for_each_chunk_mut(&mut out, k, k * n, |i, row| {
        let g = &dc[i * n..(i + 1) * n];
        for (kk, o) in row.iter_mut().enumerate() {
            *o = dot(g, &b[kk * n..(kk + 1) * n]);
        }
    });
    out
}

/// Gradient w.r.t. the right operand: `a[m,k]ᵀ · dc[m,n]`.
pub(crate) fn matmul_grad_rhs<F: Scalar>(a: &[F], dc: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    par::for_each_chunk_mut(&mut out, n, m * n, |kk, row| {
        for i in 0..m {
            axpy(a[i * k + kk], &dc[i * n..(i + 1) * n], row);
        }
    });
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::lit(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    cols: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / cols;
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let n = F::lit(cols as f64);
    let eps = F::lit(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *h = (v - mean) * rs;
        }
    }
    let mut y = vec![F::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            y[i] = xhat[i] * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    cols: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = dy.len() / cols;
    let n = F::lit(cols as f64);
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgamma = vec![F::zero(); cols];
    let mut dbeta = vec![F::zero(); cols];
    let mut dxhat = vec![F::zero(); cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let (dyr, xr) = (&dy[span.clone()], &xhat[span.clone()]);
        for c in 0..cols {
            dxhat[c] = dyr[c] * gamma[c];
            dgamma[c] = dgamma[c] + dyr[c] * xr[c];
            dbeta[c] = dbeta[c] + dyr[c];
        }
        let m1 = dxhat.iter().copied().sum::<F>() / n;
        let m2 = dot(&dxhat, xr) / n;
        for (c, o) in dx[span].iter_mut().enumerate() {
            *o = rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Layout of a right-padded batch of sequences flattened to `[batch*seq_len, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub n_heads: usize,
}

/// Copies head `co..co+dh` of rows `0..n` of one example into a contiguous
/// `[n, dh]` buffer.
fn head_slice<F: Scalar>(x: &[F], base: usize, n: usize, d: usize, co: usize, dh: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x[base + r * d + co..base + r * d + co + dh]);
    }
    out
}

/// Causal multi-head attention. Returns `(out, probs)` where `probs` holds the
/// `[batch, heads, seq, seq]` attention weights (upper triangle zero).
/// Example `b` only has `lens[b]` real rows; rows past it are padding, attend
/// to nothing, and come out zero. Query rows before `starts[b]` are skipped
/// the same way (their keys and values are still attended to).
pub(crate) fn causal_attention<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    lay: AttnLayout,
    lens: &[usize],
    starts: &[usize],
) -> (Vec<F>, Vec<F>) {
    let AttnLayout {
        batch,
        seq_len: l,
        n_heads: h,
    } = lay;
    let dh = d / h;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let blocks = par::map_range(batch, |b| {
        let base = b * l * d;
        let n = lens[b].min(l);
        let mut out = vec![F::zero(); l * d];
        let mut probs = vec![F::zero(); h * l * l];
        let mut scores = vec![F::zero(); l];
        let mut acc = vec![F::zero(); dh];
        for head in 0..h {
            let co = head * dh;
            let kh = head_slice(k, base, n, d, co, dh);
            let vh = head_slice(v, base, n, d, co, dh);
            for i in starts[b].min(n)..n {
                let qi = &q[base + i * d + co..base + i * d + co + dh];
                let mut mx = F::neg_infinity();
                for (s, kj) in scores[..=i].iter_mut().zip(kh.chunks_exact(dh)) {
                    *s = dot(qi, kj) * scale;
                    mx = mx.max(*s);
                }
                let mut z = F::zero();
                for s in &mut scores[..=i] {
                    *s = (*s - mx).exp();
                    z = z + *s;
                }
                let prow = &mut probs[(head * l + i) * l..(head * l + i) * l + i + 1];
                acc.iter_mut().for_each(|a| *a = F::zero());
                for ((p, &s), vj) in prow.iter_mut().zip(&scores[..=i]).zip(vh.chunks_exact(dh)) {
                    *p = s / z;
                    axpy(*p, vj, &mut acc);
                }
                out[i * d + co..i * d + co + dh].copy_from_slice(&acc);
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(batch * l * d);
    let mut probs = Vec::with_capacity(batch * h * l * l);
    for (o, p) in blocks {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention_backward<F: Scalar>(
    dout: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    d: usize,
    lay: AttnLayout,
    lens: &[usize],
    starts: &[usize],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let AttnLayout {
        batch,
        seq_len: l,
        n_heads: h,
    } = lay;
    let dh = d / h;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let blocks = par::map_range(batch, |b| {
        let base = b * l * d;
        let n = lens[b].min(l);
        let mut dq = vec![F::zero(); l * d];
        let mut dk = vec![F::zero(); l * d];
        let mut dv = vec![F::zero(); l * d];
        let mut dp = vec![F::zero(); l];
        for head in 0..h {
            let co = head * dh;
            let kh = head_slice(k, base, n, d, co, dh);
            let vh = head_slice(v, base, n, d, co, dh);
            let mut dkh = vec![F::zero(); n * dh];
            let mut dvh = vec![F::zero(); n * dh];
            let mut dqi = vec![F::zero(); dh];
            for i in starts[b].min(n)..n {
                let prow = &probs[((b * h + head) * l + i) * l..((b * h + head) * l + i) * l + i + 1];
                let go = &dout[base + i * d + co..base + i * d + co + dh];
                let mut acc = F::zero();
                for (((g, &p), vj), dvj) in dp[..=i]
                    .iter_mut()
                    .zip(prow)
                    .zip(vh.chunks_exact(dh))
                    .zip(dvh.chunks_exact_mut(dh))
                {
                    *g = dot(go, vj);
                    acc = acc + p * *g;
                    axpy(p, go, dvj);
                }
                let qi = &q[base + i * d + co..base + i * d + co + dh];
                dqi.iter_mut().for_each(|x| *x = F::zero());
                for (((&g, &p), kj), dkj) in dp[..=i]
                    .iter()
                    .zip(prow)
                    .zip(kh.chunks_exact(dh))
                    .zip(dkh.chunks_exact_mut(dh))
                {
                    let ds = p * (g - acc) * scale;
                    axpy(ds, kj, &mut dqi);
                    axpy(ds, qi, dkj);
                }
                dq[i * d + co..i * d + co + dh].copy_from_slice(&dqi);
            }
            for r in 0..n {
                dk[r * d + co..r * d + co + dh].copy_from_slice(&dkh[r * dh..(r + 1) * dh]);
                dv[r * d + co..r * d + co + dh].copy_from_slice(&dvh[r * dh..(r + 1) * dh]);
            }
        }
        (dq, dk, dv)
    });
    let n = batch * l * d;
    let (mut dq, mut dk, mut dv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (a, b, c) in blocks {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

/// Log-sum-exp of one row with max subtraction.
#[inline]
pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let z: F = row.iter().map(|&x| (x - mx).exp()).sum();
    mx + z.ln()
}

pub(crate) fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mx).exp();
        z = z + *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}
