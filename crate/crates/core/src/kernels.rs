//! Forward and backward numeric kernels.
//!
//! Every reduction accumulates sequentially in row-major order so results are
//! bit-reproducible and match the obvious nested-loop formulation exactly.
//! The tensor-level functions here are the pure forward ops; [`crate::autodiff`]
//! wraps them with gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn require_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// `a [m×n] · b [n×p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank("matmul", a, 2)?;
    require_rank("matmul", b, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let p = b.shape()[1];
    if b.shape()[0] != n {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * p];
    matmul_into(a.data(), b.data(), &mut out, m, n, p);
    Tensor::new(&[m, p], out)
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `a [m×n] · bᵀ` where `b` is `[p×n]`.
pub(crate) fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * p + j] = out[i * p + j] + acc;
        }
    }
}

/// `aᵀ · b` where `a` is `[n×m]` and `b` is `[n×p]`; accumulates into `out [m×p]`.
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, p: usize) {
    for k in 0..n {
        let brow = &b[k * p..(k + 1) * p];
        for i in 0..m {
            let aki = a[k * m + i];
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
}

/// Geometry of a batched valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    /// Accepts `[C×H×W]` or `[B×C×H×W]` input.
    pub fn infer(input: &[usize], kernels: &[usize], bias: &[usize]) -> Result<Self> {
        let (batch, rest) = match input.len() {
            3 => (1, input),
            4 => (input[0], &input[1..]),
            _ => return Err(Error::dim("conv2d_valid", format!("input shape {input:?}"))),
        };
        if kernels.len() != 4 {
            return Err(Error::dim("conv2d_valid", format!("kernel shape {kernels:?}")));
        }
        let (in_ch, h, w) = (rest[0], rest[1], rest[2]);
        let (out_ch, kc, kh, kw) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if kc != in_ch {
            return Err(Error::shape("conv2d_valid", input, kernels));
        }
        if kh > h || kw > w {
            return Err(Error::dim(
                "conv2d_valid",
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        if bias.iter().product::<usize>() != out_ch {
            return Err(Error::shape("conv2d_valid", kernels, bias));
        }
        Ok(Self {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
        } else {
            vec![self.out_ch, self.out_h(), self.out_w()]
        }
    }
}

/// Unpadded stride-1 cross-correlation plus per-output-channel bias.
///
/// Each output starts at its bias and accumulates over (channel, row, column)
/// of the kernel in that order.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = ConvDims::infer(input.shape(), kernels.shape(), bias.shape())?;
    let out = conv_forward(&dims, input.data(), kernels.data(), bias.data());
    Tensor::new(&dims.out_shape(input.rank() == 4), out)
}

/// Elements allowed in one im2col buffer; larger batches are processed in chunks.
const COLUMN_BUDGET: usize = 1 << 22;

impl ConvDims {
    fn taps(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn chunk(&self) -> usize {
        (COLUMN_BUDGET / (self.taps() * self.out_h() * self.out_w()).max(1)).clamp(1, self.batch)
    }
}

/// Unrolls images `b0..b0+n` into `cols[tap][(b−b0)·plane + pixel]`, taps ordered (channel, row, column).
fn im2col<T: Scalar>(d: &ConvDims, input: &[T], b0: usize, n: usize, cols: &mut Vec<T>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = oh * ow;
    let width = n * plane;
    cols.clear();
    cols.resize(d.taps() * width, T::zero());
    for c in 0..d.in_ch {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let tap = (c * d.kh + ky) * d.kw + kx;
                let row = &mut cols[tap * width..(tap + 1) * width];
                for bi in 0..n {
                    let chan = &input[((b0 + bi) * d.in_ch + c) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..oh {
                        let src = &chan[(oy + ky) * d.w + kx..][..ow];
                        row[bi * plane + oy * ow..][..ow].copy_from_slice(src);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(d: &ConvDims, input: &[T], kernels: &[T], bias: &[T]) -> Vec<T> {
    let plane = d.out_h() * d.out_w();
    let taps = d.taps();
    let mut out = vec![T::zero(); d.batch * d.out_ch * plane];
    let mut cols = Vec::new();
    let mut acc = Vec::new();
    let step = d.chunk();
    for b0 in (0..d.batch).step_by(step) {
        let n = step.min(d.batch - b0);
        let width = n * plane;
        im2col(d, input, b0, n, &mut cols);
        for o in 0..d.out_ch {
            acc.clear();
            acc.resize(width, bias[o]);
            let k = &kernels[o * taps..(o + 1) * taps];
            for (t, &wv) in k.iter().enumerate() {
                for (a, &x) in acc.iter_mut().zip(&cols[t * width..(t + 1) * width]) {
                    *a = *a + wv * x;
                }
            }
            for bi in 0..n {
                out[((b0 + bi) * d.out_ch + o) * plane..][..plane].copy_from_slice(&acc[bi * plane..][..plane]);
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernels, d_bias)`; the input gradient only when asked for.
pub(crate) fn conv_backward<T: Scalar>(
    d: &ConvDims,
    input: &[T],
    kernels: &[T],
    dout: &[T],
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = oh * ow;
    let taps = d.taps();
    let mut din = vec![T::zero(); input.len()];
    let mut dk = vec![T::zero(); kernels.len()];
    let mut db = vec![T::zero(); d.out_ch];
    let mut cols = Vec::new();
    let mut rows = Vec::new();
    let mut g = Vec::new();
    let mut dcols = Vec::new();
    let step = d.chunk();
    for b0 in (0..d.batch).step_by(step) {
        let n = step.min(d.batch - b0);
        let width = n * plane;
        im2col(d, input, b0, n, &mut cols);
        rows.clear();
        rows.resize(cols.len(), T::zero());
        for t in 0..taps {
            for (p, &x) in cols[t * width..(t + 1) * width].iter().enumerate() {
                rows[p * taps + t] = x;
            }
        }
        if want_input {
            dcols.clear();
            dcols.resize(taps * width, T::zero());
        }
        for o in 0..d.out_ch {
            g.clear();
            for bi in 0..n {
                g.extend_from_slice(&dout[((b0 + bi) * d.out_ch + o) * plane..][..plane]);
            }
            db[o] = g.iter().fold(db[o], |acc, &v| acc + v);
            let dk_o = &mut dk[o * taps..(o + 1) * taps];
            for (p, &gv) in g.iter().enumerate() {
                for (dkv, &x) in dk_o.iter_mut().zip(&rows[p * taps..(p + 1) * taps]) {
                    *dkv = *dkv + gv * x;
                }
            }
            if want_input {
                for t in 0..taps {
                    let wv = kernels[o * taps + t];
                    for (dc, &gv) in dcols[t * width..(t + 1) * width].iter_mut().zip(&g) {
                        *dc = *dc + wv * gv;
                    }
                }
            }
        }
        if want_input {
            for c in 0..d.in_ch {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let tap = (c * d.kh + ky) * d.kw + kx;
                        let row = &dcols[tap * width..(tap + 1) * width];
                        for bi in 0..n {
                            let dchan = &mut din[((b0 + bi) * d.in_ch + c) * d.h * d.w..][..d.h * d.w];
                            for oy in 0..oh {
                                let dst = &mut dchan[(oy + ky) * d.w + kx..][..ow];
                                for (dv, &v) in dst.iter_mut().zip(&row[bi * plane + oy * ow..][..ow]) {
                                    *dv = *dv + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (want_input.then_some(din), dk, db)
}

/// 2×2 non-overlapping max pooling over the last two axes.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, _) = maxpool2_with_argmax(input)?;
    Ok(out)
}

/// Forward pass that also reports, for each output, the flat input index it
/// came from. Ties resolve to the first element in row-major window order.
pub(crate) fn maxpool2_with_argmax<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::dim("maxpool2", format!("input shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2", format!("odd spatial extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let planes = input.len() / (h * w);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let mut oshape = shape.to_vec();
    let r = oshape.len();
    oshape[r - 2] = oh;
    oshape[r - 1] = ow;
    Ok((Tensor::new(&oshape, out)?, arg))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Softmax along the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_row(row);
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot = yr.iter().zip(dyr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Layer normalization along the last axis with population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let n = x.cols();
    if n < 2 {
        return Err(Error::dim("layer_norm", "normalized width must be at least 2"));
    }
    if gain.len() != n || shift.len() != n {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let out = layer_norm_forward(x.data(), gain.data(), shift.data(), n, eps);
    Tensor::new(x.shape(), out)
}

/// Per-row `(mean, 1/sqrt(var+eps))`.
pub(crate) fn layer_norm_stats<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_usize(row.len()).expect("width");
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from_f64c(eps)).sqrt())
}

pub(crate) fn layer_norm_forward<T: Scalar>(x: &[T], gain: &[T], shift: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let (mean, inv) = layer_norm_stats(row, eps);
        for ((&v, &g), &s) in row.iter().zip(gain).zip(shift) {
            out.push((v - mean) * inv * g + s);
        }
    }
    out
}

/// Returns `(dx, d_gain, d_shift)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    dy: &[T],
    n: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let nf = T::from_usize(n).expect("width");
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); n];
    let mut ds = vec![T::zero(); n];
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for ((row, dyr), dxr) in x.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let (mean, inv) = layer_norm_stats(row, eps);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..n {
            xhat[i] = (row[i] - mean) * inv;
            dxhat[i] = dyr[i] * gain[i];
            dg[i] = dg[i] + dyr[i] * xhat[i];
            ds[i] = ds[i] + dyr[i];
            sum_dxhat = sum_dxhat + dxhat[i];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[i] * xhat[i];
        }
        for i in 0..n {
            dxr[i] = inv / nf * (nf * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
        }
    }
    (dx, dg, ds)
}
