//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op of one forward pass. [`Tape::backward`] walks
//! the tape in reverse and returns [`Gradients`], which can be folded into the
//! `grad` slots of a [`Params`] set.
//!
//! Matrix ops work on rank-2 tensors; "row" ops (softmax, layer norm, bias)
//! act on the last axis of any rank.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::params::{ParamId, Params};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, eps: f64 },
    Conv { input: Var, kernels: Var, bias: Var, dims: ConvDims },
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, rows: Vec<usize> },
    TileRows { a: Var, reps: usize },
    GateSum { gate: Var, feats: Var },
    LnClamp { a: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::GateSum { .. } => "gate_sum",
            Op::LnClamp { .. } => "ln_clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    kinks: DefaultHasher,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            kinks: DefaultHasher::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not tied to a parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a parameter; repeated calls return the same variable.
    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of every branch decision taken so far (ReLU signs, pooling
    /// winners, log clamps). Two evaluations with equal fingerprints lie in the
    /// same smooth piece of the function.
    pub fn kink_fingerprint(&self) -> u64 {
        self.kinks.finish()
    }

    /// Index of the first recorded value holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.all_finite())
    }

    /// Describes the first non-finite value: its position, producing op,
    /// shape, and parameter name for parameter leaves.
    pub fn describe_non_finite(&self, params: &Params<T>) -> Option<String> {
        let idx = self.first_non_finite()?;
        let node = &self.nodes[idx];
        let param = self
            .params
            .iter()
            .find(|(_, v)| v.0 == idx)
            .map(|(id, _)| format!(" (parameter `{}`)", params.get(*id).name))
            .unwrap_or_default();
        Some(format!(
            "tape value #{idx} from {} with shape {:?}{param}",
            node.op.name(),
            node.value.shape()
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = two_d("matmul_bt", self.value(a))?;
        let (p, n2) = two_d("matmul_bt", self.value(b))?;
        if n != n2 {
            return Err(Error::shape("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * p];
        kernels::matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, p], out)?, Op::MatMulBt(a, b), ng))
    }

    /// Dense layer `x · wᵀ + b` with `x [m×in]`, `w [out×in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, n) = two_d("linear", self.value(x))?;
        let (p, n2) = two_d("linear", self.value(w))?;
        if n != n2 {
            return Err(Error::shape("linear", self.value(x).shape(), self.value(w).shape()));
        }
        let mut out = vec![T::zero(); m * p];
        kernels::matmul_bt_into(self.value(x).data(), self.value(w).data(), &mut out, m, n, p);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != p {
                return Err(Error::shape("linear", self.value(w).shape(), bias.shape()));
            }
            for row in out.chunks_mut(p) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o = *o + bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(Tensor::new(&[m, p], out)?, Op::Linear { x, w, b }, ng))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Adds vector `b` to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o = *o + bv;
            }
        }
        let v = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::AddRow(a, b), ng))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::from_f64c(scale), T::from_f64c(shift));
        let v = self.value(a).map(|x| x * s + c);
        let ng = self.needs(&[a]);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        let s = T::from_f64c(scale);
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = kernels::relu(self.value(a));
        let mut word = 0u64;
        for (i, &x) in self.nodes[a.0].value.data().iter().enumerate() {
            word = (word << 1) | u64::from(x > T::zero());
            if i % 64 == 63 {
                self.kinks.write_u64(word);
                word = 0;
            }
        }
        self.kinks.write_u64(word);
        let ng = self.needs(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = kernels::softmax(self.value(a));
        let ng = self.needs(&[a]);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let v = kernels::layer_norm(self.value(x), self.value(gain), self.value(shift), eps)?;
        let ng = self.needs(&[x, gain, shift]);
        Ok(self.push(v, Op::LayerNorm { x, gain, shift, eps }, ng))
    }

    /// Batched valid convolution; `input` is `[C×H×W]` or `[B×C×H×W]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernels), self.value(bias));
        let dims = ConvDims::infer(ti.shape(), tk.shape(), tb.shape())?;
        let out = kernels::conv_forward(&dims, ti.data(), tk.data(), tb.data());
        let v = Tensor::new(&dims.out_shape(ti.rank() == 4), out)?;
        let ng = self.needs(&[input, kernels, bias]);
        Ok(self.push(
            v,
            Op::Conv {
                input,
                kernels,
                bias,
                dims,
            },
            ng,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (v, argmax) = kernels::maxpool2_with_argmax(self.value(input))?;
        for &a in &argmax {
            self.kinks.write_usize(a);
        }
        let ng = self.needs(&[input]);
        Ok(self.push(v, Op::MaxPool { input, argmax }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = two_d("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(src[i * n + j]);
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (m, _) = two_d("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = two_d("concat_cols", self.value(p))?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(&[m, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, n) = two_d("concat_rows", self.value(*first))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = two_d("concat_rows", self.value(p))?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), self.value(p).shape()));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pm;
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(&[rows, n], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = two_d("slice_cols", self.value(a))?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { a, start }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = two_d("gather_rows", self.value(a))?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "empty row selection"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::dim("gather_rows", format!("row {r} out of {m}")));
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// `[P×n] → [reps·P × n]`, row `r·P + p` being row `p` of the input.
    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Result<Var> {
        let (m, n) = two_d("tile_rows", self.value(a))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(reps * m * n);
        for _ in 0..reps {
            out.extend_from_slice(src);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[reps * m, n], out)?, Op::TileRows { a, reps }, ng))
    }

    /// Gate-weighted sum of feature rows: `gate [P×k]`, `feats [k·P × d]`
    /// with row `j·P + p` holding feature `j` of item `p`; returns `[P×d]`.
    pub fn gate_sum(&mut self, gate: Var, feats: Var) -> Result<Var> {
        let (p, k) = two_d("gate_sum", self.value(gate))?;
        let (rows, d) = two_d("gate_sum", self.value(feats))?;
        if rows != p * k {
            return Err(Error::shape("gate_sum", self.value(gate).shape(), self.value(feats).shape()));
        }
        let (c, f) = (self.value(gate).data(), self.value(feats).data());
        let mut out = vec![T::zero(); p * d];
        for i in 0..p {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let w = c[i * k + j];
                let frow = &f[(j * p + i) * d..(j * p + i + 1) * d];
                for (o, &x) in orow.iter_mut().zip(frow) {
                    *o = *o + w * x;
                }
            }
        }
        let ng = self.needs(&[gate, feats]);
        Ok(self.push(Tensor::new(&[p, d], out)?, Op::GateSum { gate, feats }, ng))
    }

    /// `ln(max(a, floor))`.
    pub fn ln_clamp(&mut self, a: Var, floor: f64) -> Var {
        let fl = T::from_f64c(floor);
        for &x in self.nodes[a.0].value.data() {
            self.kinks.write_u8(u8::from(x < fl));
        }
        let v = self.value(a).map(|x| if x < fl { fl.ln() } else { x.ln() });
        let ng = self.needs(&[a]);
        self.push(v, Op::LnClamp { a, floor }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::from_usize(t.len()).expect("length");
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::dim("backward", format!("output must be scalar, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        let t = Tensor::new(shape, data).expect("gradient shape matches value");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = two_d("matmul", self.value(*a))?;
                let p = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * n];
                    kernels::matmul_bt_into(gd, self.value(*b).data(), &mut da, m, p, n);
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * p];
                    kernels::matmul_at_into(self.value(*a).data(), gd, &mut db, m, n, p);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, n) = two_d("matmul_bt", self.value(*a))?;
                let p = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * n];
                    kernels::matmul_into(gd, self.value(*b).data(), &mut da, m, p, n);
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); p * n];
                    kernels::matmul_at_into(gd, self.value(*a).data(), &mut db, m, p, n);
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, n) = two_d("linear", self.value(*x))?;
                let p = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * n];
                    kernels::matmul_into(gd, self.value(*w).data(), &mut dx, m, p, n);
                    self.acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); p * n];
                    kernels::matmul_at_into(gd, self.value(*x).data(), &mut dw, m, p, n);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.acc(grads, *b, column_sums(gd, p));
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.acc(grads, *a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    self.acc(grads, *b, column_sums(gd, n));
                }
            }
            Op::Affine(a, scale) => {
                let s = T::from_f64c(*scale);
                self.acc(grads, *a, gd.iter().map(|&v| v * s).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = self.nodes[idx].value.data();
                let d = kernels::softmax_backward(y, gd, g.cols());
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let n = self.value(*x).cols();
                let (dx, dg, ds) =
                    kernels::layer_norm_backward(self.value(*x).data(), self.value(*gain).data(), gd, n, *eps);
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dg);
                self.acc(grads, *shift, ds);
            }
            Op::Conv {
                input,
                kernels: k,
                bias,
                dims,
            } => {
                let (din, dk, db) =
                    kernels::conv_backward(dims, self.value(*input).data(), self.value(*k).data(), gd, self.wants(*input));
                if let Some(din) = din {
                    self.acc(grads, *input, din);
                }
                self.acc(grads, *k, dk);
                self.acc(grads, *bias, db);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] = d[src] + gv;
                }
                self.acc(grads, *input, d);
            }
            Op::Reshape(a) => self.acc(grads, *a, gd.to_vec()),
            Op::Transpose(a) => {
                let (m, n) = two_d("transpose", self.value(*a))?;
                let mut d = vec![T::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        d[i * n + j] = gd[j * m + i];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = two_d("slice_cols", self.value(*a))?;
                let w = g.cols();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.acc(grads, *a, d);
            }
            Op::GatherRows { a, rows } => {
                let n = g.cols();
                let mut d = vec![T::zero(); self.value(*a).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        d[r * n + c] = d[r * n + c] + gd[i * n + c];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::TileRows { a, reps } => {
                let len = self.value(*a).len();
                let mut d = vec![T::zero(); len];
                for r in 0..*reps {
                    for (dv, &gv) in d.iter_mut().zip(&gd[r * len..(r + 1) * len]) {
                        *dv = *dv + gv;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GateSum { gate, feats } => {
                let (p, k) = two_d("gate_sum", self.value(*gate))?;
                let d = self.value(*feats).cols();
                let (c, f) = (self.value(*gate).data(), self.value(*feats).data());
                if self.wants(*gate) {
                    let mut dc = vec![T::zero(); p * k];
                    for i in 0..p {
                        let grow = &gd[i * d..(i + 1) * d];
                        for j in 0..k {
                            let frow = &f[(j * p + i) * d..(j * p + i + 1) * d];
                            dc[i * k + j] = grow.iter().zip(frow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                        }
                    }
                    self.acc(grads, *gate, dc);
                }
                if self.wants(*feats) {
                    let mut df = vec![T::zero(); p * k * d];
                    for i in 0..p {
                        let grow = &gd[i * d..(i + 1) * d];
                        for j in 0..k {
                            let w = c[i * k + j];
                            for (o, &gv) in df[(j * p + i) * d..(j * p + i + 1) * d].iter_mut().zip(grow) {
                                *o = w * gv;
                            }
                        }
                    }
                    self.acc(grads, *feats, df);
                }
            }
            Op::LnClamp { a, floor } => {
                let fl = T::from_f64c(*floor);
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v < fl { T::zero() } else { g / v })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = gd[0] / T::from_usize(n).expect("length");
                self.acc(grads, *a, vec![v; n]);
            }
        }
        Ok(())
    }

    /// Parameters touched by this tape, in registration order.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.params.iter().map(|(&id, &var)| (id, var)).collect();
        v.sort_by_key(|(_, var)| var.0);
        v
    }
}

fn column_sums<T: Scalar>(data: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in data.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every parameter used on `tape` into its `grad` slot.
    pub fn accumulate_into(&self, tape: &Tape<T>, params: &mut Params<T>) {
        for (id, var) in tape.param_vars() {
            if let Some(g) = self.get(var) {
                params.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
