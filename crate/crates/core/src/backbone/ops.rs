//! Row-wise kernels shared by the inference and training paths. Every kernel
//! processes rows independently and in a fixed order, so a row's result does
//! not depend on how many other rows are in the call.

use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn rmsnorm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    d: usize,
    out: &mut [T],
    rstd: &mut [T],
) {
    let eps = T::from_f64(NORM_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for ((xr, yr), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let mut ss = T::zero();
        for &v in xr {
            ss += v * v;
        }
        let s = T::one() / (ss * inv_d + eps).sqrt();
        *r = s;
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = v * s * g;
        }
    }
}

/// Accumulates into `dx` and `dgain`.
pub(crate) fn rmsnorm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    gain: &[T],
    rstd: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for (((dyr, xr), dxr), &s) in dy
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mut dot = T::zero();
        for i in 0..d {
            dot += dyr[i] * gain[i] * xr[i];
            dgain[i] += dyr[i] * xr[i] * s;
        }
        let coef = s * s * s * dot * inv_d;
        for i in 0..d {
            dxr[i] += s * dyr[i] * gain[i] - coef * xr[i];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

/// Rotates each head's (2i, 2i+1) pairs by `position · base^(-2i/head_dim)`.
/// `inverse` applies the transpose rotation (used by the backward pass).
pub(crate) fn rope_rotate<T: Scalar>(
    x: &mut [T],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    let d = n_heads * head_dim;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut cs = vec![(T::zero(), T::zero()); half];
    for (row, &pos) in x.chunks_exact_mut(d).zip(positions) {
        for (slot, &f) in cs.iter_mut().zip(&freqs) {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            *slot = (T::from_f64(c), T::from_f64(if inverse { -s } else { s }));
        }
        for head in row.chunks_exact_mut(head_dim) {
            for (i, &(c, s)) in cs.iter().enumerate() {
                let a = head[2 * i];
                let b = head[2 * i + 1];
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Shape of one causal attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape {
    /// Rows already in the cache, visible to every query.
    pub ctx: usize,
    /// New rows; query `i` also sees new rows `0..=i`.
    pub n: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn span(&self) -> usize {
        self.ctx + self.n
    }
}

/// Causal attention. Keys/values are the cached rows followed by the new rows.
/// When `probs` is given it receives the weights laid out
/// `[head][query][ctx + n]` (entries past the causal limit are zero).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Scalar>(
    shape: AttnShape,
    q: &[T],
    cache_k: &[T],
    cache_v: &[T],
    new_k: &[T],
    new_v: &[T],
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let AttnShape { ctx, n, n_heads, head_dim: hd } = shape;
    let d = shape.width();
    let span = shape.span();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let cols = |r: usize, h: usize| r * d + h * hd..r * d + (h + 1) * hd;
    let mut scores = vec![T::zero(); span];
    for h in 0..n_heads {
        for i in 0..n {
            let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
            let limit = ctx + i + 1;
            let mut max = T::neg_infinity();
            for (j, s) in scores[..limit].iter_mut().enumerate() {
                let kj = if j < ctx {
                    &cache_k[cols(j, h)]
                } else {
                    &new_k[cols(j - ctx, h)]
                };
                let mut dot = T::zero();
                for (a, b) in qi.iter().zip(kj) {
                    dot += *a * *b;
                }
                *s = dot * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut sum = T::zero();
            for s in &mut scores[..limit] {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = T::one() / sum;
            for s in &mut scores[..limit] {
                *s *= inv;
            }
            let oi = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            oi.iter_mut().for_each(|x| *x = T::zero());
            for (j, &p) in scores[..limit].iter().enumerate() {
                let vj = if j < ctx {
                    &cache_v[cols(j, h)]
                } else {
                    &new_v[cols(j - ctx, h)]
                };
                for (o, &v) in oi.iter_mut().zip(vj) {
                    *o += p * v;
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                let dst = &mut pr[(h * n + i) * span..(h * n + i + 1) * span];
                dst[..limit].copy_from_slice(&scores[..limit]);
                dst[limit..].iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
}

/// Backward of [`attention_forward`] for the no-cache case used in training.
/// Accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    shape: AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    debug_assert_eq!(shape.ctx, 0);
    let AttnShape { n, n_heads, head_dim: hd, .. } = shape;
    let d = shape.width();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut dp = vec![T::zero(); n];
    for h in 0..n_heads {
        let cols = |r: usize| r * d + h * hd..r * d + (h + 1) * hd;
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &dout[cols(i)];
            let mut weighted = T::zero();
            for j in 0..=i {
                let mut dot = T::zero();
                for (a, b) in doi.iter().zip(&v[cols(j)]) {
                    dot += *a * *b;
                }
                dp[j] = dot;
                weighted += p[j] * dot;
                for (g, &o) in dv[cols(j)].iter_mut().zip(doi) {
                    *g += p[j] * o;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in 0..hd {
                    dq[i * d + h * hd + c] += ds * k[j * d + h * hd + c];
                    dk[j * d + h * hd + c] += ds * q[i * d + h * hd + c];
                }
            }
        }
    }
}
