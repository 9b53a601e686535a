//! Query-conditioned soft selection over a patch's `k` feature vectors.
//!
//! For graph query `gq` and feature vectors `FVⱼ` (one shared network for all `j`):
//!
//! ```text
//! η_gq  = ReLU(W₁·gq + b₁)
//! η₁⁽ʲ⁾ = ReLU(W₂fv·FVⱼ + W₂gq·η_gq + b₂)
//! η₂⁽ʲ⁾ = W₃·η₁⁽ʲ⁾ + b₃
//! C     = softmax(η₂)
//! AFV   = Σⱼ Cⱼ·FVⱼ
//! ```
//!
//! A missing query is the zero vector.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Params};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Floor applied to gate entries before taking logs.
pub const GATE_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2_fv: ParamId,
    pub w2_gq: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub d_model: usize,
    pub d_hidden: usize,
}

/// Per-patch aggregated features `[P×d]` and gate vectors `[P×k]`.
#[derive(Debug, Clone, Copy)]
pub struct AggregateVars {
    pub afv: Var,
    pub gate: Var,
}

impl Aggregator {
    pub fn build<T: Scalar>(params: &mut Params<T>, d_model: usize, rng: &mut Rng) -> Result<Self> {
        let d_hidden = d_model;
        let s_in = 1.0 / (d_model as f64).sqrt();
        let s_h = 1.0 / (d_hidden as f64).sqrt();
        Ok(Self {
            w1: params.add_uniform("aggregator.w1", &[d_model, d_model], s_in, rng)?,
            b1: params.add_uniform("aggregator.b1", &[d_model], s_in, rng)?,
            w2_fv: params.add_uniform("aggregator.w2_fv", &[d_hidden, d_model], s_in, rng)?,
            w2_gq: params.add_uniform("aggregator.w2_gq", &[d_hidden, d_model], s_in, rng)?,
            b2: params.add_uniform("aggregator.b2", &[d_hidden], s_in, rng)?,
            w3: params.add_uniform("aggregator.w3", &[1, d_hidden], s_h, rng)?,
            b3: params.add_uniform("aggregator.b3", &[1], s_h, rng)?,
            d_model,
            d_hidden,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 7] {
        [self.w1, self.b1, self.w2_fv, self.w2_gq, self.b2, self.w3, self.b3]
    }

    /// `feats` is `[k·P × d]` in sub-module-major order; `gq`, when given, is `[P×d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        feats: Var,
        gq: Option<Var>,
        k: usize,
    ) -> Result<AggregateVars> {
        let shape = tape.value(feats).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_model || k == 0 || !shape[0].is_multiple_of(k) {
            return Err(Error::dim(
                "aggregate",
                format!("features {shape:?} do not hold {k} rows of width {} per patch", self.d_model),
            ));
        }
        let p = shape[0] / k;
        let gq = match gq {
            Some(g) => {
                if tape.value(g).shape() != [p, self.d_model] {
                    return Err(Error::shape("aggregate", tape.value(g).shape(), &[p, self.d_model]));
                }
                g
            }
            None => tape.constant(Tensor::zeros(&[p, self.d_model])),
        };
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let eta_gq = tape.linear(gq, w1, Some(b1))?;
        let eta_gq = tape.relu(eta_gq);

        let w2_fv = tape.param(params, self.w2_fv);
        let w2_gq = tape.param(params, self.w2_gq);
        let b2 = tape.param(params, self.b2);
        let from_fv = tape.linear(feats, w2_fv, None)?;
        let from_gq = tape.linear(eta_gq, w2_gq, None)?;
        let from_gq = tape.tile_rows(from_gq, k)?;
        let eta1 = tape.add(from_fv, from_gq)?;
        let eta1 = tape.add_row(eta1, b2)?;
        let eta1 = tape.relu(eta1);

        let w3 = tape.param(params, self.w3);
        let b3 = tape.param(params, self.b3);
        let eta2 = tape.linear(eta1, w3, Some(b3))?;
        let eta2 = tape.reshape(eta2, &[k, p])?;
        let eta2 = tape.transpose(eta2)?;
        let gate = tape.softmax(eta2);
        let afv = tape.gate_sum(gate, feats)?;
        Ok(AggregateVars { afv, gate })
    }
}

/// Mean over patches of `−KL(C ‖ uniform)` for a `[P×k]` gate matrix.
pub fn divergence_loss_var<T: Scalar>(tape: &mut Tape<T>, gate: Var) -> Result<Var> {
    let shape = tape.value(gate).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("divergence_loss", format!("gate shape {shape:?}")));
    }
    let (p, k) = (shape[0], shape[1]);
    let logs = tape.ln_clamp(gate, GATE_LOG_FLOOR);
    let ratio_logs = tape.affine(logs, 1.0, (k as f64).ln());
    let terms = tape.mul(gate, ratio_logs)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -1.0 / p as f64))
}

/// `−Σ cⱼ·ln(cⱼ·k)` with entries floored at 1e-12 inside the log.
pub fn divergence_loss(c: &[f64]) -> f64 {
    let k = c.len() as f64;
    -c.iter().map(|&v| v * (v.max(GATE_LOG_FLOOR).ln() + k.ln())).sum::<f64>()
}

/// Aggregates one patch: `mfv [k×d]`, optional `gq [d]`; returns `(afv [d], c [k])`.
pub fn aggregate<T: Scalar>(
    agg: &Aggregator,
    params: &Params<T>,
    mfv: &Tensor<T>,
    gq: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if mfv.rank() != 2 {
        return Err(Error::dim("aggregate", format!("mfv shape {:?}", mfv.shape())));
    }
    let k = mfv.shape()[0];
    let mut tape = Tape::new();
    let feats = tape.constant(mfv.clone());
    let gq = match gq {
        Some(g) => {
            if g.len() != agg.d_model {
                return Err(Error::shape("aggregate", g.shape(), &[agg.d_model]));
            }
            Some(tape.constant(g.clone().reshape(&[1, agg.d_model])?))
        }
        None => None,
    };
    let out = agg.forward(&mut tape, params, feats, gq, k)?;
    Ok((
        tape.value(out.afv).clone().reshape(&[agg.d_model])?,
        tape.value(out.gate).clone().reshape(&[k])?,
    ))
}

/// Per-patch results of [`batch_aggregate`].
#[derive(Debug, Clone)]
pub struct BatchAggregate<T> {
    pub afv: Vec<Tensor<T>>,
    pub gates: Vec<Tensor<T>>,
    /// Mean divergence loss; only produced on the query-free (initial) pass.
    pub divergence: Option<f64>,
}

pub fn batch_aggregate<T: Scalar>(
    agg: &Aggregator,
    params: &Params<T>,
    mfvs: &[Tensor<T>],
    gqs: Option<&[Tensor<T>]>,
) -> Result<BatchAggregate<T>> {
    let Some(first) = mfvs.first() else {
        return Err(Error::dim("batch_aggregate", "no patches"));
    };
    let (k, d) = (first.shape()[0], agg.d_model);
    let p = mfvs.len();
    if let Some(g) = gqs {
        if g.len() != p {
            return Err(Error::dim("batch_aggregate", format!("{} queries for {p} patches", g.len())));
        }
    }
    let mut rows = Vec::with_capacity(k * p * d);
    for j in 0..k {
        for m in mfvs {
            if m.shape() != [k, d] {
                return Err(Error::shape("batch_aggregate", m.shape(), &[k, d]));
            }
            rows.extend_from_slice(m.row(j));
        }
    }
    let mut tape = Tape::new();
    let feats = tape.constant(Tensor::new(&[k * p, d], rows)?);
    let gq = match gqs {
        Some(g) => {
            let data: Vec<T> = g.iter().flat_map(|t| t.data().iter().copied()).collect();
            Some(tape.constant(Tensor::new(&[p, d], data)?))
        }
        None => None,
    };
    let out = agg.forward(&mut tape, params, feats, gq, k)?;
    let divergence = if gqs.is_none() {
        let l = divergence_loss_var(&mut tape, out.gate)?;
        Some(tape.value(l).data()[0].to_f64c())
    } else {
        None
    };
    let afv = tape.value(out.afv);
    let gate = tape.value(out.gate);
    Ok(BatchAggregate {
        afv: (0..p).map(|i| Tensor::new(&[d], afv.row(i).to_vec()).expect("row")).collect(),
        gates: (0..p).map(|i| Tensor::new(&[k], gate.row(i).to_vec()).expect("row")).collect(),
        divergence,
    })
}
