//! Layer normalization and multi-head attention with hand-written backward
//! rules. Both are grad-checked in 64-bit in the tests below.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatView, Real, Tensor};

/// One independent attention problem inside a stacked batch: queries
/// `q_start..q_start+q_len` attend keys `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub n_heads: usize,
    /// Query `i` of a segment sees keys `0..=i` of that segment.
    pub causal: bool,
    pub segments: Vec<AttnSegment>,
}

impl AttnLayout {
    pub(crate) fn validate(&self, q: &[usize], k: &[usize], v: &[usize]) -> Result<()> {
        if q.len() != 2 || k.len() != 2 || v.len() != 2 || q[1] != k[1] || k != v {
            return Err(Error::shape("attention", q, k));
        }
        if self.n_heads == 0 || q[1] % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} not divisible by {} heads",
                q[1], self.n_heads
            )));
        }
        for s in &self.segments {
            if s.q_start + s.q_len > q[0] || s.k_start + s.k_len > k[0] {
                return Err(Error::shape("attention segment", q, k));
            }
            if s.k_len == 0 || (self.causal && s.q_len > s.k_len) {
                return Err(Error::shape("attention segment", &[s.q_len], &[s.k_len]));
            }
        }
        Ok(())
    }
}

pub(crate) fn layer_norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, Vec<(T, T)>) {
    let d = x.cols();
    let inv_d = T::lit(d as f64).recip();
    let mut out = Vec::with_capacity(x.len());
    let mut stats = Vec::with_capacity(x.rows());
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        for c in 0..d {
            out.push((row[c] - mean) * rstd * gamma[c] + beta[c]);
        }
        stats.push((mean, rstd));
    }
    (Tensor::new(x.shape().to_vec(), out).expect("layer norm shape"), stats)
}

pub(crate) fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &[(T, T)],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = x.cols();
    let inv_d = T::lit(d as f64).recip();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let row = x.row(r);
        let grow = &g[r * d..(r + 1) * d];
        for c in 0..d {
            xhat[c] = (row[c] - mean) * rstd;
            dxhat[c] = grow[c] * gamma[c];
            dgamma[c] += grow[c] * xhat[c];
            dbeta[c] += grow[c];
        }
        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for c in 0..d {
            dx[r * d + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

fn head_view<T>(data: &[T], start_row: usize, rows: usize, d: usize, head: usize, dh: usize) -> MatView<'_, T> {
    MatView {
        data: &data[start_row * d + head * dh..],
        rows,
        cols: dh,
        rs: d,
        cs: 1,
    }
}

/// Returns the attended values and the attention probabilities of every
/// (segment, head) block, concatenated in that order.
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttnLayout,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / layout.n_heads;
    let scale = T::lit(dh as f64).sqrt().recip();
    let mut out = vec![T::zero(); q.rows() * d];
    let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * layout.n_heads;
    let mut probs = Vec::with_capacity(total);
    for s in &layout.segments {
        for h in 0..layout.n_heads {
            let mut scores = vec![T::zero(); s.q_len * s.k_len];
            gemm(
                head_view(q.data(), s.q_start, s.q_len, d, h, dh),
                head_view(k.data(), s.k_start, s.k_len, d, h, dh).t(),
                &mut scores,
                s.k_len,
                T::zero(),
            );
            for (i, row) in scores.chunks_mut(s.k_len).enumerate() {
                let visible = if layout.causal { i + 1 } else { s.k_len };
                let mut max = T::neg_infinity();
                for x in &mut row[..visible] {
                    *x *= scale;
                    max = max.max(*x);
                }
                let mut sum = T::zero();
                for x in &mut row[..visible] {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in &mut row[..visible] {
                    *x /= sum;
                }
                for x in &mut row[visible..] {
                    *x = T::zero();
                }
            }
            let dst = &mut out[s.q_start * d + h * dh..];
            gemm(
                MatView::row_major(&scores, s.q_len, s.k_len),
                head_view(v.data(), s.k_start, s.k_len, d, h, dh),
                dst,
                d,
                T::zero(),
            );
            probs.extend_from_slice(&scores);
        }
    }
    (Tensor::new(vec![q.rows(), d], out).expect("attention shape"), probs)
}

pub(crate) fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttnLayout,
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / layout.n_heads;
    let scale = T::lit(dh as f64).sqrt().recip();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut offset = 0;
    for s in &layout.segments {
        for h in 0..layout.n_heads {
            let n = s.q_len * s.k_len;
            let p = &probs[offset..offset + n];
            offset += n;
            let go = head_view(g, s.q_start, s.q_len, d, h, dh);
            // dV += Pᵀ·dO
            gemm(
                MatView::row_major(p, s.q_len, s.k_len).t(),
                go,
                &mut dv[s.k_start * d + h * dh..],
                d,
                T::one(),
            );
            // dP = dO·Vᵀ, then softmax backward into dS (scaled)
            let mut ds = vec![T::zero(); n];
            gemm(go, head_view(v.data(), s.k_start, s.k_len, d, h, dh).t(), &mut ds, s.k_len, T::zero());
            for (prow, drow) in p.chunks(s.k_len).zip(ds.chunks_mut(s.k_len)) {
                let inner: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pi) in drow.iter_mut().zip(prow) {
                    *x = pi * (*x - inner) * scale;
                }
            }
            let dsv = MatView::row_major(&ds, s.q_len, s.k_len);
            gemm(
                dsv,
                head_view(k.data(), s.k_start, s.k_len, d, h, dh),
                &mut dq[s.q_start * d + h * dh..],
                d,
                T::one(),
            );
            gemm(
                dsv.t(),
                head_view(q.data(), s.q_start, s.q_len, d, h, dh),
                &mut dk[s.k_start * d + h * dh..],
                d,
                T::one(),
            );
        }
    }
    (dq, dk, dv)
}
