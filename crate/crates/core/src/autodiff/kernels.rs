//! Slice-level numeric kernels shared by the forward and backward rules.

use super::scalar::{cast, gemm, Float, Layout};

/// Unfolds `x` (`channels x len`) into a `(channels*k) x out_len` column
/// matrix. Positions outside `[0, len)` after shifting by `pad_left` read zero.
pub(crate) fn im2col<F: Float>(
    x: &[F],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); channels * k * out_len];
    for c in 0..channels {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..k {
            let dst = &mut cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (l, slot) in dst.iter_mut().enumerate() {
                let t = l * stride + j;
                if t >= pad_left && t - pad_left < len {
                    *slot = row[t - pad_left];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters (adds) columns back into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<F: Float>(
    cols: &[F],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
    dx: &mut [F],
) {
    for c in 0..channels {
        let row = &mut dx[c * len..(c + 1) * len];
        for j in 0..k {
            let src = &cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (l, &v) in src.iter().enumerate() {
                let t = l * stride + j;
                if t >= pad_left && t - pad_left < len {
                    row[t - pad_left] += v;
                }
            }
        }
    }
}

pub(crate) fn softmax_rows<F: Float>(data: &mut [F], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Given softmax output `p` and upstream `dp` (row-wise), writes the gradient
/// with respect to the logits into `dp`.
pub(crate) fn softmax_rows_backward<F: Float>(p: &[F], dp: &mut [F], width: usize) {
    for (prow, drow) in p.chunks(width).zip(dp.chunks_mut(width)) {
        let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each `width`-long row; returns per-row means and reciprocal
/// standard deviations.
pub(crate) fn layer_norm_forward<F: Float>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    width: usize,
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / width;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_w = cast::<F>(1.0 / width as f64);
    let eps = cast::<F>(LAYER_NORM_EPS);
    for (xr, yr) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mean = xr.iter().copied().sum::<F>() * inv_w;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_w;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..width {
            yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Multi-head scaled dot-product attention over `[batch, seq, dim]` inputs.
/// Returns the output and the attention probabilities `[batch, heads, seq, seq]`.
pub(crate) fn attention_forward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let dh = dim / heads;
    let scale = cast::<F>(1.0 / (dh as f64).sqrt());
    let mut out = vec![F::zero(); batch * seq * dim];
    let mut probs = vec![F::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * dim + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            // scores = Q K^T * scale
            gemm(
                seq,
                dh,
                seq,
                scale,
                q,
                Layout::strided(base, dim, 1),
                k,
                Layout::strided(base, 1, dim),
                F::zero(),
                &mut probs,
                Layout::rows(p_off, seq),
            );
            softmax_rows(&mut probs[p_off..p_off + seq * seq], seq);
            gemm(
                seq,
                seq,
                dh,
                F::one(),
                &probs,
                Layout::rows(p_off, seq),
                v,
                Layout::strided(base, dim, 1),
                F::zero(),
                &mut out,
                Layout::strided(base, dim, 1),
            );
        }
    }
    (out, probs)
}

/// Accumulates attention input gradients. Any of `dq`, `dk`, `dv` may be
/// skipped by passing `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
    mut dq: Option<&mut [F]>,
    mut dk: Option<&mut [F]>,
    mut dv: Option<&mut [F]>,
) {
    let dh = dim / heads;
    let scale = cast::<F>(1.0 / (dh as f64).sqrt());
    let mut ds = vec![F::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * dim + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            let p = &probs[p_off..p_off + seq * seq];
            if let Some(dv) = dv.as_deref_mut() {
                // dV += P^T dO
                gemm(
                    seq,
                    seq,
                    dh,
                    F::one(),
                    p,
                    Layout::transposed(0, seq),
                    dout,
                    Layout::strided(base, dim, 1),
                    F::one(),
                    dv,
                    Layout::strided(base, dim, 1),
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO V^T
            gemm(
                seq,
                dh,
                seq,
                F::one(),
                dout,
                Layout::strided(base, dim, 1),
                v,
                Layout::strided(base, 1, dim),
                F::zero(),
                &mut ds,
                Layout::rows(0, seq),
            );
            softmax_rows_backward(p, &mut ds, seq);
            if let Some(dq) = dq.as_deref_mut() {
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &ds,
                    Layout::rows(0, seq),
                    k,
                    Layout::strided(base, dim, 1),
                    F::one(),
                    dq,
                    Layout::strided(base, dim, 1),
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &ds,
                    Layout::transposed(0, seq),
                    q,
                    Layout::strided(base, dim, 1),
                    F::one(),
                    dk,
                    Layout::strided(base, dim, 1),
                );
            }
        }
    }
}

/// Segment count and zero-padded length for 50%-overlapping segmentation.
///
/// The signal is right-padded to a multiple of the hop plus one extra hop, so
/// every frame after the first hop is covered by exactly two segments.
pub fn segment_layout(len: usize, chunk: usize) -> (usize, usize) {
    let hop = chunk / 2;
    let padded = len.div_ceil(hop) * hop + hop;
    let segments = (padded - chunk) / hop + 1;
    (segments, padded)
}

/// Number of segments covering each of the first `len` frames.
pub(crate) fn segment_coverage(len: usize, chunk: usize, segments: usize) -> Vec<usize> {
    let hop = chunk / 2;
    let mut count = vec![0usize; len];
    for s in 0..segments {
        for c in 0..chunk {
            let t = s * hop + c;
            if t < len {
                count[t] += 1;
            }
        }
    }
    count
}
