//! Masked-region reconstruction pretext task.
//!
//! A grid level `l ≥ 2` is sampled, a fraction of its cells is painted
//! mid-gray before patch generation, and a transformer decoder reconstructs
//! every patch lying wholly inside the painted cells from its position and
//! scale encoding, attending to the encoder's nodes that are not fully masked.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Encoder, ModelConfig};
use crate::image::{ImageBuffer, Rect};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::{Adam, AdamConfig};
use crate::params::Params;
use crate::patches::{bilinear_resize, centered_square, static_cells, static_patch_count, PatchMeta, PatchSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const MASK_FILL: f32 = 0.5;

/// Number of level-`level` cells masked for `fraction`: `round(fraction · 4^{level−1})`, at least one.
pub fn masked_cell_count(level: usize, fraction: f64) -> usize {
    let cells = (1usize << (2 * (level - 1))) as f64;
    ((fraction * cells).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Grid depth the mask was drawn for.
    pub k: usize,
    pub level: usize,
    pub fraction: f64,
    /// Raster indices of the masked level-`level` cells, ascending.
    pub cells: Vec<usize>,
    /// Indices into a static grid of depth `k` of the patches wholly inside the masked cells.
    pub fully_masked: Vec<usize>,
}

impl MaskSpec {
    /// Masked cell rectangles in pixel coordinates of `image`.
    pub fn regions(&self, image: &ImageBuffer) -> Vec<Rect> {
        let cells = static_cells(&centered_square(image), self.level);
        self.cells.iter().map(|&c| cells[c]).collect()
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("mask fraction {fraction} outside (0, 1)")));
    }
    Ok(())
}

/// Mask at a fixed level.
pub fn mask_at_level(k: usize, level: usize, fraction: f64, rng: &mut Rng) -> Result<MaskSpec> {
    check_fraction(fraction)?;
    if k < 2 || level < 2 || level > k {
        return Err(Error::Config(format!("mask level {level} outside 2..={k}")));
    }
    let side = 1usize << (level - 1);
    let cells = rng.choose_distinct(side * side, masked_cell_count(level, fraction));
    let mut fully_masked = Vec::new();
    for j in level..=k {
        let scale = 1usize << (j - level);
        let row_len = side * scale;
        let offset = static_patch_count(j - 1);
        for &c in &cells {
            let (r, q) = (c / side, c % side);
            for dr in 0..scale {
                for dq in 0..scale {
                    fully_masked.push(offset + (r * scale + dr) * row_len + q * scale + dq);
                }
            }
        }
    }
    fully_masked.sort_unstable();
    Ok(MaskSpec {
        k,
        level,
        fraction,
        cells,
        fully_masked,
    })
}

/// Mask at a level drawn uniformly from `2..=k`.
pub fn generate_mask(k: usize, fraction: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if k < 2 {
        return Err(Error::Config(format!("masking needs k >= 2, got {k}")));
    }
    let level = rng.range_inclusive(2, k);
    mask_at_level(k, level, fraction, rng)
}

/// Paints `regions` with [`MASK_FILL`].
pub fn apply_mask(image: &ImageBuffer, regions: &[Rect]) -> ImageBuffer {
    let mut out = image.clone();
    for r in regions {
        for c in 0..ImageBuffer::CHANNELS {
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    out.set(c, y, x, MASK_FILL);
                }
            }
        }
    }
    out
}

/// Indices of the patches in `set` whose region lies inside one masked region.
pub fn fully_masked(set: &PatchSet, regions: &[Rect]) -> Vec<usize> {
    (0..set.len())
        .filter(|&i| regions.iter().any(|r| r.contains(&set.regions[i])))
        .collect()
}

/// `mean((predicted − target)²)` over every pixel of every patch.
pub fn recon_loss<T: Scalar>(predicted: &[Tensor<T>], target: &[Tensor<T>]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::dim(
            "recon_loss",
            format!("{} predictions for {} targets", predicted.len(), target.len()),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::shape("recon_loss", p.shape(), t.shape()));
        }
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let d = a.to_f64c() - b.to_f64c();
            sum += d * d;
        }
        count += p.len();
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Post-norm transformer decoder with a pixel head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub head: Linear,
    pub rescale: usize,
}

impl Decoder {
    pub fn build<T: Scalar>(config: &ModelConfig, params: &mut Params<T>, rng: &mut Rng) -> Result<Self> {
        let (d, heads, d_ff) = (config.d_model, config.graph.heads, config.graph.d_ff);
        let layers = (0..config.decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attention: MultiHeadAttention::build(params, &format!("{name}.self"), d, heads, rng)?,
                    norm1: LayerNorm::build(params, &format!("{name}.norm1"), d)?,
                    cross_attention: MultiHeadAttention::build(params, &format!("{name}.cross"), d, heads, rng)?,
                    norm2: LayerNorm::build(params, &format!("{name}.norm2"), d)?,
                    ffn: FeedForward::build(params, &format!("{name}.ffn"), d, d_ff, d, rng)?,
                    norm3: LayerNorm::build(params, &format!("{name}.norm3"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let h = config.grid.rescale;
        Ok(Self {
            layers,
            head: Linear::build(params, "decoder.head", d, 3 * h * h, rng)?,
            rescale: h,
        })
    }

    /// `queries [M×d]`, `memory [R×d]` → pixels `[M × 3H²]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        queries: Var,
        memory: Var,
    ) -> Result<Var> {
        let mut q = queries;
        for layer in &self.layers {
            let a = layer.self_attention.forward(tape, params, q, q)?;
            let s = tape.add(q, a)?;
            q = layer.norm1.forward(tape, params, s)?;
            let c = layer.cross_attention.forward(tape, params, q, memory)?;
            let s = tape.add(q, c)?;
            q = layer.norm2.forward(tape, params, s)?;
            let f = layer.ffn.forward(tape, params, q)?;
            let s = tape.add(q, f)?;
            q = layer.norm3.forward(tape, params, s)?;
        }
        self.head.forward(tape, params, q)
    }
}

/// Encoder plus pretext decoder.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn build<T: Scalar>(config: ModelConfig, params: &mut Params<T>, rng: &mut Rng) -> Result<Self> {
        if config.decoder_layers < 1 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let encoder = Encoder::build(config, params, rng)?;
        let decoder = Decoder::build(&encoder.config, params, rng)?;
        Ok(Self { encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    /// Reconstructs one patch per entry of `masked_meta` from the memory nodes `[R×d]`.
    pub fn decode<T: Scalar>(
        &self,
        params: &Params<T>,
        masked_meta: &[PatchMeta],
        memory: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let queries = self.encoder.position.forward(&mut tape, params, masked_meta)?;
        let mem = tape.constant(memory.clone());
        let out = self.decoder.forward(&mut tape, params, queries, mem)?;
        let h = self.decoder.rescale;
        let out = tape.value(out);
        (0..out.rows())
            .map(|i| Tensor::new(&[3, h, h], out.row(i).to_vec()))
            .collect()
    }
}

/// Tape handles of the pretext objective, each averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub recon: Var,
    pub divergence: Var,
}

/// Builds `recon + β·L_div` for a batch with pre-drawn masks.
pub fn pretext_objective<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model,
    params: &Params<T>,
    images: &[ImageBuffer],
    masks: &[MaskSpec],
    beta: f64,
) -> Result<ObjectiveVars> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Data(format!("{} images with {} masks", images.len(), masks.len())));
    }
    let grid = &model.config().grid;
    let h = grid.rescale;
    let mut recons = Vec::new();
    let mut divs = Vec::with_capacity(images.len());
    for (image, mask) in images.iter().zip(masks) {
        let regions = mask.regions(image);
        let set = grid.generate(&apply_mask(image, &regions))?;
        let enc = model.encoder.encode_patches(tape, params, &set)?;
        divs.push(enc.divergence);
        let masked = fully_masked(&set, &regions);
        if masked.is_empty() {
            log::debug!("mask at level {} covers no whole patch; no reconstruction term", mask.level);
            continue;
        }
        let visible: Vec<usize> = (0..set.len()).filter(|i| masked.binary_search(i).is_err()).collect();
        let metas: Vec<PatchMeta> = masked.iter().map(|&i| set.meta[i]).collect();
        let queries = model.encoder.position.forward(tape, params, &metas)?;
        let memory = tape.gather_rows(enc.nodes, &visible)?;
        let pred = model.decoder.forward(tape, params, queries, memory)?;
        let mut target = Vec::with_capacity(masked.len() * 3 * h * h);
        for &i in &masked {
            let patch = bilinear_resize(&image.crop(&set.regions[i]), h);
            target.extend(patch.data().iter().map(|&v| T::from_f64c(v as f64)));
        }
        let target = tape.constant(Tensor::new(&[masked.len(), 3 * h * h], target)?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        recons.push(tape.mean(sq));
    }
    let recon = mean_of(tape, &recons)?;
    let divergence = mean_of(tape, &divs)?;
    let weighted = tape.scale(divergence, beta);
    let total = tape.add(recon, weighted)?;
    Ok(ObjectiveVars {
        total,
        recon,
        divergence,
    })
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    if vars.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    /// Weight of the divergence loss; its sign selects the optimisation direction.
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_fraction: f64,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            beta: 0.1,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            mask_fraction: 0.25,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        check_fraction(self.mask_fraction)?;
        if self.batch_size < 1 || self.checkpoint_every < 1 || !self.beta.is_finite() {
            return Err(Error::Config("batch_size and checkpoint_every must be positive, beta finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub recon: f64,
    pub divergence: f64,
}

/// One optimisation step: masks drawn from `rng`, gradients accumulated, Adam update applied.
pub fn train_step(
    model: &Model,
    params: &mut Params<f32>,
    optimizer: &mut Adam<f32>,
    images: &[ImageBuffer],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepLosses> {
    if images.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let k = model.config().grid.levels;
    let masks = images
        .iter()
        .map(|_| generate_mask(k, cfg.mask_fraction, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let obj = pretext_objective(&mut tape, model, params, images, &masks, cfg.beta)?;
    let read = |v: Var| tape.value(v).data()[0].to_f64c();
    let losses = StepLosses {
        total: read(obj.total),
        recon: read(obj.recon),
        divergence: read(obj.divergence),
    };
    if !losses.total.is_finite() {
        let detail = tape
            .describe_non_finite(params)
            .unwrap_or_else(|| "no finite-check culprit found".into());
        return Err(Error::NonFinite(format!("loss {}: first non-finite {detail}", losses.total)));
    }
    params.zero_grad();
    tape.backward(obj.total)?.accumulate_into(&tape, params);
    optimizer.update(params)?;
    Ok(losses)
}
