//! Forward and backward kernels on flat row-major buffers.

use super::Scalar;

pub(crate) const L2_FLOOR: f64 = 1e-12;

/// Shape of a matrix operand after an optional transpose.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl MatView {
    /// Extents (rows, cols) of the logical operand.
    pub fn dims(self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Strides (row, col) of the logical operand over the stored buffer.
    pub fn strides(self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }

    pub fn flipped(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }
}

/// `out (+)= op(a) · op(b)`.
pub(crate) fn matmul<F: Scalar>(
    a: &[F],
    av: MatView,
    b: &[F],
    bv: MatView,
    out: &mut [F],
    accumulate: bool,
) {
    let (m, k) = av.dims();
    let (_, n) = bv.dims();
    let (rsa, csa) = av.strides();
    let (rsb, csb) = bv.strides();
    let beta = if accumulate { F::one() } else { F::zero() };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    F::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, out);
}

pub(crate) fn softmax_rows<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        let inv = sum.recip();
        yr.iter_mut().for_each(|y| *y *= inv);
    }
}

pub(crate) fn log_softmax_rows<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = xr.iter().map(|&v| (v - max).exp()).sum();
        let shift = max + sum.ln();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v - shift;
        }
    }
}

/// `dx += y ⊙ (dy − ⟨dy, y⟩)` per row.
pub(crate) fn softmax_rows_backward<F: Scalar>(y: &[F], dy: &[F], cols: usize, dx: &mut [F]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

/// `dx += dy − softmax · Σdy` per row, where `y` is the log-softmax output.
pub(crate) fn log_softmax_rows_backward<F: Scalar>(y: &[F], dy: &[F], cols: usize, dx: &mut [F]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let total: F = dyr.iter().copied().sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += g - yv.exp() * total;
        }
    }
}

pub(crate) fn l2_normalize_rows<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    let floor = F::of(L2_FLOOR);
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let norm = xr.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v / norm;
        }
    }
}

pub(crate) fn l2_normalize_rows_backward<F: Scalar>(
    x: &[F],
    y: &[F],
    dy: &[F],
    cols: usize,
    dx: &mut [F],
) {
    let floor = F::of(L2_FLOOR);
    for (((xr, yr), dyr), dxr) in x
        .chunks_exact(cols)
        .zip(y.chunks_exact(cols))
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let raw = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
        if raw > floor {
            let dot: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
                *d += (g - yv * dot) / raw;
            }
        } else {
            // Constant denominator below the floor.
            for (d, &g) in dxr.iter_mut().zip(dyr) {
                *d += g / floor;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

/// Row-wise layer normalization. Returns the normalized rows and per-row
/// reciprocal standard deviations for the backward pass.
pub(crate) fn layer_norm<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let cols = gain.len();
    let n = F::of(cols as f64);
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for ((xr, hr), yr) in x
        .chunks_exact(cols)
        .zip(xhat.chunks_exact_mut(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let r = (var + eps).sqrt().recip();
        for (i, (h, y)) in hr.iter_mut().zip(yr.iter_mut()).enumerate() {
            *h = (xr[i] - mean) * r;
            *y = *h * gain[i] + bias[i];
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<F: Scalar>(
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dgain: Option<&mut [F]>,
    dbias: Option<&mut [F]>,
) {
    let cols = gain.len();
    let n = F::of(cols as f64);
    if let Some(dg) = dgain {
        for (hr, dyr) in xhat.chunks_exact(cols).zip(dy.chunks_exact(cols)) {
            for ((g, &h), &d) in dg.iter_mut().zip(hr).zip(dyr) {
                *g += h * d;
            }
        }
    }
    if let Some(db) = dbias {
        for dyr in dy.chunks_exact(cols) {
            for (b, &d) in db.iter_mut().zip(dyr) {
                *b += d;
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxhat = vec![F::zero(); cols];
        for (((hr, dyr), dxr), &r) in xhat
            .chunks_exact(cols)
            .zip(dy.chunks_exact(cols))
            .zip(dx.chunks_exact_mut(cols))
            .zip(rstd)
        {
            for ((dh, &d), &g) in dxhat.iter_mut().zip(dyr).zip(gain) {
                *dh = d * g;
            }
            let mean_dh = dxhat.iter().copied().sum::<F>() / n;
            let mean_dhh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / n;
            for ((o, &dh), &h) in dxr.iter_mut().zip(&dxhat).zip(hr) {
                *o += r * (dh - mean_dh - h * mean_dhh);
            }
        }
    }
}

/// Geometry of a fused multi-head self-attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnGeom {
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
    pub causal: bool,
}

impl AttnGeom {
    fn head_dim(self) -> usize {
        self.width / self.heads
    }
}

/// Multi-head attention over packed `[q | k | v]` rows. `qkv` holds
/// `n_seq · seq` rows of width `3 · width`; the output holds `width` columns.
/// Returns the attention probabilities `[n_seq, heads, seq, seq]`.
pub(crate) fn attention<F: Scalar>(qkv: &[F], g: AttnGeom, out: &mut [F]) -> Vec<F> {
    let (s, d, dh) = (g.seq, g.width, g.head_dim());
    let stride = 3 * d;
    let n_seq = qkv.len() / (s * stride);
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::zero(); n_seq * g.heads * s * s];
    let mut scores = vec![F::zero(); s * s];
    let mut head_out = vec![F::zero(); s * dh];
    for b in 0..n_seq {
        let base = b * s * stride;
        for h in 0..g.heads {
            let q = &qkv[base + h * dh..];
            let k = &qkv[base + d + h * dh..];
            let v = &qkv[base + 2 * d + h * dh..];
            F::gemm(s, dh, s, q, stride as isize, 1, k, 1, stride as isize, F::zero(), &mut scores);
            for i in 0..s {
                let row = &mut scores[i * s..(i + 1) * s];
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if g.causal && j > i {
                        F::neg_infinity()
                    } else {
                        *x * scale
                    };
                }
            }
            let p = &mut probs[(b * g.heads + h) * s * s..(b * g.heads + h + 1) * s * s];
            softmax_rows(&scores, s, p);
            F::gemm(s, s, dh, p, s as isize, 1, v, stride as isize, 1, F::zero(), &mut head_out);
            for i in 0..s {
                let dst = (b * s + i) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
            }
        }
    }
    probs
}

pub(crate) fn attention_backward<F: Scalar>(
    qkv: &[F],
    probs: &[F],
    dout: &[F],
    g: AttnGeom,
    dqkv: &mut [F],
) {
    let (s, d, dh) = (g.seq, g.width, g.head_dim());
    let stride = 3 * d;
    let n_seq = qkv.len() / (s * stride);
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dp = vec![F::zero(); s * s];
    let mut tmp = vec![F::zero(); s * dh];
    for b in 0..n_seq {
        let base = b * s * stride;
        for h in 0..g.heads {
            let p = &probs[(b * g.heads + h) * s * s..(b * g.heads + h + 1) * s * s];
            let q = &qkv[base + h * dh..];
            let k = &qkv[base + d + h * dh..];
            let v = &qkv[base + 2 * d + h * dh..];
            let dob = &dout[b * s * d + h * dh..];
            // dP = dO · Vᵀ
            F::gemm(s, dh, s, dob, d as isize, 1, v, 1, stride as isize, F::zero(), &mut dp);
            // dV = Pᵀ · dO
            F::gemm(s, s, dh, p, 1, s as isize, dob, d as isize, 1, F::zero(), &mut tmp);
            add_block(dqkv, base + 2 * d + h * dh, stride, &tmp, s, dh);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
            for i in 0..s {
                let pr = &p[i * s..(i + 1) * s];
                let dr = &mut dp[i * s..(i + 1) * s];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ = dS · K
            F::gemm(s, s, dh, &dp, s as isize, 1, k, stride as isize, 1, F::zero(), &mut tmp);
            add_block(dqkv, base + h * dh, stride, &tmp, s, dh);
            // dK = dSᵀ · Q
            F::gemm(s, s, dh, &dp, 1, s as isize, q, stride as isize, 1, F::zero(), &mut tmp);
            add_block(dqkv, base + d + h * dh, stride, &tmp, s, dh);
        }
    }
}

fn add_block<F: Scalar>(dst: &mut [F], offset: usize, stride: usize, src: &[F], rows: usize, cols: usize) {
    for i in 0..rows {
        let o = offset + i * stride;
        for (a, &b) in dst[o..o + cols].iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
            *a += b;
        }
    }
}
