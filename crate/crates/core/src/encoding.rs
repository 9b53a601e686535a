//! Position and scale encodings of patch metadata `(x, y, A)`.
//!
//! The sinusoidal layout gives `x` and `y` a quarter of `d_model` each and `A`
//! the remaining half; within a variable's block, entry `2i` is
//! `sin(v·λ^{i/d_model})` and entry `2i+1` the matching cosine.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::params::Params;
use crate::patches::PatchMeta;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    /// Small feed-forward network on the raw `(x, y, A)` triple.
    Trainable,
    /// Fixed sinusoidal encoding.
    Periodic,
    /// Sinusoidal encoding (λ = 1) projected by one dense layer.
    TrainablePeriodic,
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainable" => Ok(Self::Trainable),
            "periodic" => Ok(Self::Periodic),
            "trainable_periodic" => Ok(Self::TrainablePeriodic),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Trainable => "trainable",
            Self::Periodic => "periodic",
            Self::TrainablePeriodic => "trainable_periodic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub d_model: usize,
    pub lambda: f64,
}

impl EncoderConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of 4", self.d_model)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda {} must be positive", self.lambda)));
        }
        if self.variant == EncoderVariant::TrainablePeriodic && self.lambda != 1.0 {
            return Err(Error::Config("the trainable periodic encoding uses lambda = 1".into()));
        }
        Ok(())
    }

    /// Widths allotted to `(x, y, A)`.
    pub fn split(&self) -> (usize, usize, usize) {
        (self.d_model / 4, self.d_model / 4, self.d_model / 2)
    }
}

/// Sinusoidal encoding of one patch.
pub fn periodic_encoding(meta: &PatchMeta, d_model: usize, lambda: f64) -> Vec<f64> {
    let widths = [d_model / 4, d_model / 4, d_model / 2];
    let vars = [meta.x, meta.y, meta.area_coverage];
    let mut out = Vec::with_capacity(d_model);
    for (var, width) in vars.into_iter().zip(widths) {
        for i in 0..width / 2 {
            let arg = var * lambda.powf(i as f64 / d_model as f64);
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

pub fn encode_periodic<T: Scalar>(meta: &PatchMeta, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    Tensor::from_f64(&[cfg.d_model], &periodic_encoding(meta, cfg.d_model, cfg.lambda))
}

#[derive(Debug, Clone)]
enum Head {
    Trainable(FeedForward),
    Periodic,
    TrainablePeriodic(Linear),
}

/// Maps patch metadata to encoding vectors `EV`.
#[derive(Debug, Clone)]
pub struct PosScaleEncoder {
    pub config: EncoderConfig,
    head: Head,
}

impl PosScaleEncoder {
    pub fn build<T: Scalar>(config: EncoderConfig, params: &mut Params<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let head = match config.variant {
            EncoderVariant::Trainable => Head::Trainable(FeedForward::build(params, "posenc.ffn", 3, d, d, rng)?),
            EncoderVariant::Periodic => Head::Periodic,
            EncoderVariant::TrainablePeriodic => {
                Head::TrainablePeriodic(Linear::build(params, "posenc.proj", d, d, rng)?)
            }
        };
        Ok(Self { config, head })
    }

    /// Encodings for every patch, `[P × d_model]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, metas: &[PatchMeta]) -> Result<Var> {
        if metas.is_empty() {
            return Err(Error::dim("encode", "no patches"));
        }
        let (p, d) = (metas.len(), self.config.d_model);
        match &self.head {
            Head::Trainable(ffn) => {
                let raw: Vec<f64> = metas.iter().flat_map(|m| [m.x, m.y, m.area_coverage]).collect();
                let x = tape.constant(Tensor::from_f64(&[p, 3], &raw)?);
                ffn.forward(tape, params, x)
            }
            Head::Periodic | Head::TrainablePeriodic(_) => {
                let enc: Vec<f64> = metas
                    .iter()
                    .flat_map(|m| periodic_encoding(m, d, self.config.lambda))
                    .collect();
                let x = tape.constant(Tensor::from_f64(&[p, d], &enc)?);
                match &self.head {
                    Head::TrainablePeriodic(lin) => lin.forward(tape, params, x),
                    _ => Ok(x),
                }
            }
        }
    }

    /// Encoding of a single patch.
    pub fn encode<T: Scalar>(&self, params: &Params<T>, meta: &PatchMeta) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, params, std::slice::from_ref(meta))?;
        tape.value(v).clone().reshape(&[self.config.d_model])
    }
}

/// `FFV = AFV + EV`.
pub fn form_ffv<T: Scalar>(afv: &Tensor<T>, ev: &Tensor<T>) -> Result<Tensor<T>> {
    if afv.shape() != ev.shape() {
        return Err(Error::shape("form_ffv", afv.shape(), ev.shape()));
    }
    let data = afv.data().iter().zip(ev.data()).map(|(&a, &e)| a + e).collect();
    Tensor::new(afv.shape(), data)
}
