//! Parameterised building blocks shared by the encoder and decoder.
//!
//! Blocks hold only [`ParamId`]s; values live in a [`Params`] set so one
//! structure serves both `f32` training and `f64` gradient checks.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::LAYER_NORM_EPS;
use crate::params::{ParamId, Params};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// `x · Wᵀ + b` with `W [out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let scale = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: params.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], scale, rng)?,
            bias: params.add_uniform(format!("{name}.bias"), &[out_dim], scale, rng)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn build<T: Scalar>(params: &mut Params<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: params.add_full(format!("{name}.gain"), &[dim], 1.0)?,
            shift: params.add_full(format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let s = tape.param(params, self.shift);
        tape.layer_norm(x, g, s, LAYER_NORM_EPS)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub first: Linear,
    pub second: Linear,
}

impl FeedForward {
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::build(params, &format!("{name}.0"), in_dim, hidden, rng)?,
            second: Linear::build(params, &format!("{name}.1"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, params, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, params, h)
    }
}

/// Multi-head scaled dot-product attention with full adjacency.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::build(params, &format!("{name}.query"), d_model, d_model, rng)?,
            key: Linear::build(params, &format!("{name}.key"), d_model, d_model, rng)?,
            value: Linear::build(params, &format!("{name}.value"), d_model, d_model, rng)?,
            output: Linear::build(params, &format!("{name}.output"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    /// Queries from `q_in [M×d]`, keys and values from `kv_in [R×d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        q_in: Var,
        kv_in: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, params, q_in, kv_in)?.0)
    }

    /// Also returns the per-head attention matrices `[M×R]`.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        q_in: Var,
        kv_in: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, params, q_in)?;
        let k = self.key.forward(tape, params, kv_in)?;
        let v = self.value.forward(tape, params, kv_in)?;
        let width = self.d_model / self.heads;
        let scale = 1.0 / (width as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * width, width)?,
                    tape.slice_cols(k, h * width, width)?,
                    tape.slice_cols(v, h * width, width)?,
                )
            };
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores);
            attn.push(weights);
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.output.forward(tape, params, joined)?, attn))
    }
}
