//! Attention graph over patch nodes and the full image encoder.
//!
//! Each layer is a post-norm transformer encoder block. On aggregator layers
//! the post-attention node state is sent back to the feature aggregator as a
//! graph query, and the re-aggregated feature vector is concatenated to the
//! FFN input.

use crate::aggregator::{divergence_loss_var, Aggregator};
use crate::autodiff::{Tape, Var};
use crate::encoding::{EncoderConfig, PosScaleEncoder};
use crate::error::{Error, Result};
use crate::extractor::{patch_batch, ExtractorConfig, FeatureExtractor};
use crate::image::ImageBuffer;
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::Params;
use crate::patches::{GridConfig, PatchSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Layers whose zero-based index is a multiple of this query the aggregator.
    pub agg_period: usize,
}

impl GraphConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.layers < 1 || self.agg_period < 1 || self.d_ff < 1 {
            return Err(Error::Config("graph needs layers >= 1, agg_period >= 1, d_ff >= 1".into()));
        }
        if self.heads == 0 || !d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    pub fn uses_aggregator(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.agg_period)
    }
}

#[derive(Debug, Clone)]
pub struct GraphLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub use_aggregator: bool,
}

impl GraphLayer {
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        d_model: usize,
        cfg: &GraphConfig,
        use_aggregator: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ffn_in = if use_aggregator { 2 * d_model } else { d_model };
        Ok(Self {
            attention: MultiHeadAttention::build(params, &format!("{name}.mha"), d_model, cfg.heads, rng)?,
            norm1: LayerNorm::build(params, &format!("{name}.norm1"), d_model)?,
            ffn: FeedForward::build(params, &format!("{name}.ffn"), ffn_in, cfg.d_ff, d_model, rng)?,
            norm2: LayerNorm::build(params, &format!("{name}.norm2"), d_model)?,
            use_aggregator,
        })
    }

    /// `nodes [P×d]`; `feats [k·P×d]` is needed only on aggregator layers.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        nodes: Var,
        feedback: Option<(&Aggregator, Var, usize)>,
    ) -> Result<Var> {
        let attended = self.attention.forward(tape, params, nodes, nodes)?;
        let u = tape.add(nodes, attended)?;
        let u = self.norm1.forward(tape, params, u)?;
        let ffn_in = if self.use_aggregator {
            let (agg, feats, k) = feedback
                .ok_or_else(|| Error::Config("aggregator layer called without feature vectors".into()))?;
            let out = agg.forward(tape, params, feats, Some(u), k)?;
            tape.concat_cols(&[u, out.afv])?
        } else {
            u
        };
        let f = self.ffn.forward(tape, params, ffn_in)?;
        let y = tape.add(u, f)?;
        self.norm2.forward(tape, params, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridConfig,
    /// Number of feature-extractor sub-modules.
    pub extractors: usize,
    pub d_model: usize,
    pub encoding: EncoderConfig,
    pub graph: GraphConfig,
    pub decoder_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.encoding.validate()?;
        self.graph.validate(self.d_model)?;
        if self.encoding.d_model != self.d_model {
            return Err(Error::Config("encoding width differs from d_model".into()));
        }
        if self.extractors < 1 || self.d_model < 8 {
            return Err(Error::Config("need at least one extractor and d_model >= 8".into()));
        }
        Ok(())
    }
}

/// Patch generator, extractor, aggregator, encoder and attention graph.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub aggregator: Aggregator,
    pub position: PosScaleEncoder,
    pub layers: Vec<GraphLayer>,
}

/// Tape handles produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodeVars {
    /// Final node states `[P×d]`.
    pub nodes: Var,
    /// Gates of the initial (query-free) aggregation `[P×k]`.
    pub gate: Var,
    /// Mean divergence loss of the initial aggregation.
    pub divergence: Var,
}

impl Encoder {
    pub fn build<T: Scalar>(config: ModelConfig, params: &mut Params<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let extractor = FeatureExtractor::build(
            ExtractorConfig {
                count: config.extractors,
                input_dim: config.grid.rescale,
                d_model: d,
            },
            params,
            rng,
        )?;
        let aggregator = Aggregator::build(params, d, rng)?;
        let position = PosScaleEncoder::build(config.encoding.clone(), params, rng)?;
        let layers = (0..config.graph.layers)
            .map(|i| {
                GraphLayer::build(
                    params,
                    &format!("graph.{i}"),
                    d,
                    &config.graph,
                    config.graph.uses_aggregator(i),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            extractor,
            aggregator,
            position,
            layers,
        })
    }

    pub fn encode_patches<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        set: &PatchSet,
    ) -> Result<EncodeVars> {
        if set.rescale_dim != self.config.grid.rescale {
            return Err(Error::Config(format!(
                "patches are {}px, model expects {}px",
                set.rescale_dim, self.config.grid.rescale
            )));
        }
        let k = self.extractor.count();
        let x = patch_batch(tape, set);
        let feats = self.extractor.forward(tape, params, x)?;
        let initial = self.aggregator.forward(tape, params, feats, None, k)?;
        let divergence = divergence_loss_var(tape, initial.gate)?;
        let ev = self.position.forward(tape, params, &set.meta)?;
        let mut nodes = tape.add(initial.afv, ev)?;
        for layer in &self.layers {
            let feedback = layer.use_aggregator.then_some((&self.aggregator, feats, k));
            nodes = layer.forward(tape, params, nodes, feedback)?;
        }
        Ok(EncodeVars {
            nodes,
            gate: initial.gate,
            divergence,
        })
    }
}

/// Output of [`encode`].
#[derive(Debug, Clone)]
pub struct Encoding<T> {
    pub patches: PatchSet,
    /// `[P × d_model]`.
    pub graph: Tensor<T>,
    /// Initial gate vector per patch.
    pub gates: Vec<Tensor<T>>,
    pub divergence: f64,
}

/// Runs the whole encoder on an image.
pub fn encode<T: Scalar>(image: &ImageBuffer, encoder: &Encoder, params: &Params<T>) -> Result<Encoding<T>> {
    let set = encoder.config.grid.generate(image)?;
    let mut tape = Tape::new();
    let out = encoder.encode_patches(&mut tape, params, &set)?;
    let gate = tape.value(out.gate);
    let gates = (0..gate.rows())
        .map(|i| Tensor::new(&[gate.cols()], gate.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoding {
        graph: tape.value(out.nodes).clone(),
        gates,
        divergence: tape.value(out.divergence).data()[0].to_f64c(),
        patches: set,
    })
}

/// Multi-head self-attention over `nodes [P×d]`.
pub fn mha<T: Scalar>(attn: &MultiHeadAttention, params: &Params<T>, nodes: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(nodes.clone());
    let y = attn.forward(&mut tape, params, x, x)?;
    Ok(tape.value(y).clone())
}
