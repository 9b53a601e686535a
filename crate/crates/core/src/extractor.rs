//! Multi-feature extraction: `k` architecturally identical CNN sub-modules with
//! independent weights, each mapping a rescaled patch to a `d_model` vector.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, Params};
use crate::patches::PatchSet;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Valid convolution with a square kernel.
    Conv { kernel: usize, out_channels: usize },
    MaxPool,
}

/// One stage of the conv stack with the spatial extent and channel count it produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub kind: LayerKind,
    pub out_size: usize,
    pub channels: usize,
}

const MAX_CHANNELS: usize = 256;

/// Conv/pool schedule reducing an `input_dim`-pixel patch to 1×1.
///
/// `input_dim == 64` gives the reference 11-stage stack (60, 56, 28, 26, 24,
/// 12, 10, 8, 6, 3, 1). Other sizes alternate 5×5 (above 32 px) or 3×3 valid
/// convs with 2×2 pools until an odd extent of at most 5 remains, then one
/// last conv covers it. Channels start at 32 and double after every pool,
/// capped at 256.
pub fn conv_schedule(input_dim: usize) -> Result<Vec<StageSpec>> {
    if input_dim < 1 {
        return Err(Error::Config("patch dimension must be positive".into()));
    }
    let mut stages = Vec::new();
    let mut push = |kind, out_size, channels| stages.push(StageSpec { kind, out_size, channels });
    if input_dim == 64 {
        let table: [(usize, usize, usize); 11] = [
            (5, 60, 32),
            (5, 56, 32),
            (0, 28, 32),
            (3, 26, 64),
            (3, 24, 64),
            (0, 12, 64),
            (3, 10, 128),
            (3, 8, 128),
            (3, 6, 128),
            (0, 3, 128),
            (3, 1, 256),
        ];
        for (kernel, size, ch) in table {
            let kind = if kernel == 0 {
                LayerKind::MaxPool
            } else {
                LayerKind::Conv {
                    kernel,
                    out_channels: ch,
                }
            };
            push(kind, size, ch);
        }
        return Ok(stages);
    }

    let mut size = input_dim;
    let mut ch = 32;
    let pool = |size: &mut usize, ch: &mut usize, push: &mut dyn FnMut(LayerKind, usize, usize)| {
        *size /= 2;
        push(LayerKind::MaxPool, *size, *ch);
        *ch = (*ch * 2).min(MAX_CHANNELS);
    };
    loop {
        if size % 2 == 1 && size <= 5 {
            push(
                LayerKind::Conv {
                    kernel: size,
                    out_channels: ch,
                },
                1,
                ch,
            );
            break;
        }
        if size.is_multiple_of(2) && size <= 4 {
            pool(&mut size, &mut ch, &mut push);
            continue;
        }
        let kernel = if size >= 32 { 5 } else { 3 };
        size -= kernel - 1;
        push(
            LayerKind::Conv {
                kernel,
                out_channels: ch,
            },
            size,
            ch,
        );
        if size.is_multiple_of(2) && size >= 6 {
            pool(&mut size, &mut ch, &mut push);
        }
    }
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorConfig {
    /// Number of sub-modules.
    pub count: usize,
    pub input_dim: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
struct ConvParams {
    kernels: ParamId,
    bias: ParamId,
}

/// Weights of one CNN sub-module.
#[derive(Debug, Clone)]
pub struct SubModule {
    convs: Vec<ConvParams>,
    dense: [Linear; 2],
}

/// The `k` sub-modules together.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub schedule: Vec<StageSpec>,
    subs: Vec<SubModule>,
}

impl FeatureExtractor {
    pub fn build<T: Scalar>(config: ExtractorConfig, params: &mut Params<T>, rng: &mut Rng) -> Result<Self> {
        if config.count < 1 || config.d_model < 8 {
            return Err(Error::Config(format!(
                "extractor needs k >= 1 and d_model >= 8, got k={} d_model={}",
                config.count, config.d_model
            )));
        }
        let schedule = conv_schedule(config.input_dim)?;
        let flat = schedule.last().map(|s| s.channels).unwrap_or(3);
        let mut subs = Vec::with_capacity(config.count);
        for j in 0..config.count {
            let mut convs = Vec::new();
            let mut in_ch = 3;
            for stage in &schedule {
                if let LayerKind::Conv { kernel, out_channels } = stage.kind {
                    let idx = convs.len();
                    let fan_in = in_ch * kernel * kernel;
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    convs.push(ConvParams {
                        kernels: params.add_uniform(
                            format!("extractor.{j}.conv.{idx}.kernel"),
                            &[out_channels, in_ch, kernel, kernel],
                            scale,
                            rng,
                        )?,
                        bias: params.add_uniform(format!("extractor.{j}.conv.{idx}.bias"), &[out_channels], scale, rng)?,
                    });
                    in_ch = out_channels;
                }
            }
            let dense = [
                Linear::build(params, &format!("extractor.{j}.dense.0"), flat, config.d_model, rng)?,
                Linear::build(params, &format!("extractor.{j}.dense.1"), config.d_model, config.d_model, rng)?,
            ];
            subs.push(SubModule { convs, dense });
        }
        Ok(Self { config, schedule, subs })
    }

    pub fn count(&self) -> usize {
        self.subs.len()
    }

    /// Parameters belonging to sub-module `j`.
    pub fn sub_params(&self, j: usize) -> Vec<ParamId> {
        let s = &self.subs[j];
        let mut ids: Vec<ParamId> = s.convs.iter().flat_map(|c| [c.kernels, c.bias]).collect();
        for d in &s.dense {
            ids.push(d.weight);
            ids.push(d.bias);
        }
        ids
    }

    /// Conv stack of sub-module `j` on `[B×3×H×H]`, flattened to `[B×C]`.
    pub fn conv_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        j: usize,
        patches: Var,
    ) -> Result<Var> {
        let shape = tape.value(patches).shape().to_vec();
        let h = self.config.input_dim;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != h {
            return Err(Error::dim("extract", format!("expected [B×3×{h}×{h}] patches, got {shape:?}")));
        }
        let sub = &self.subs[j];
        let mut x = patches;
        let mut conv_idx = 0;
        for stage in &self.schedule {
            x = match stage.kind {
                LayerKind::Conv { .. } => {
                    let c = &sub.convs[conv_idx];
                    conv_idx += 1;
                    let k = tape.param(params, c.kernels);
                    let b = tape.param(params, c.bias);
                    let y = tape.conv2d(x, k, b)?;
                    tape.relu(y)
                }
                LayerKind::MaxPool => tape.maxpool2(x)?,
            };
        }
        let batch = shape[0];
        let flat = tape.value(x).len() / batch;
        tape.reshape(x, &[batch, flat])
    }

    /// Feature vectors of sub-module `j` for `[B×3×H×H]` patches: `[B × d_model]`.
    pub fn forward_sub<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        j: usize,
        patches: Var,
    ) -> Result<Var> {
        let flat = self.conv_features(tape, params, j, patches)?;
        let [d0, d1] = &self.subs[j].dense;
        let h = d0.forward(tape, params, flat)?;
        let h = tape.relu(h);
        d1.forward(tape, params, h)
    }

    /// Every sub-module on every patch, stacked sub-module-major:
    /// row `j·B + p` is feature vector `j` of patch `p`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, patches: Var) -> Result<Var> {
        let outs = (0..self.subs.len())
            .map(|j| self.forward_sub(tape, params, j, patches))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_rows(&outs)
        }
    }
}

/// Patch tensor on the tape in the layout the extractor expects.
pub fn patch_batch<T: Scalar>(tape: &mut Tape<T>, set: &PatchSet) -> Var {
    tape.constant(set.stacked().cast())
}

/// Feature vector of one `[3×H×H]` patch from sub-module `j`.
pub fn extract_fv<T: Scalar>(
    ex: &FeatureExtractor,
    params: &Params<T>,
    j: usize,
    patch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(patch.shape());
    let x = tape.constant(patch.clone().reshape(&shape)?);
    let out = ex.forward_sub(&mut tape, params, j, x)?;
    tape.value(out).clone().reshape(&[ex.config.d_model])
}

/// Relative change `‖f(s(x)) − f(x)‖ / ‖f(x)‖` of sub-module `j`'s flattened
/// conv features when the `[3×H×H]` patch is cyclically shifted by `(dx, dy)`.
/// Valid convolutions and pooling are not shift-invariant, so this is a
/// measurement rather than something expected to vanish.
pub fn shift_sensitivity<T: Scalar>(
    ex: &FeatureExtractor,
    params: &Params<T>,
    j: usize,
    patch: &Tensor<T>,
    dx: usize,
    dy: usize,
) -> Result<f64> {
    let h = ex.config.input_dim;
    if patch.shape() != [3, h, h] {
        return Err(Error::dim("shift_sensitivity", format!("expected [3×{h}×{h}], got {:?}", patch.shape())));
    }
    let src = patch.data();
    let mut shifted = vec![T::zero(); src.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..h {
                shifted[(c * h + (y + dy) % h) * h + (x + dx) % h] = src[(c * h + y) * h + x];
            }
        }
    }
    let shifted = Tensor::new(&[1, 3, h, h], shifted)?;
    let features = |input: Tensor<T>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = ex.conv_features(&mut tape, params, j, x)?;
        Ok(tape.value(out).to_f64_vec())
    };
    let base = features(patch.clone().reshape(&[1, 3, h, h])?)?;
    let moved = features(shifted)?;
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = base.iter().zip(&moved).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm.max(f64::MIN_POSITIVE))
}

/// Multi-feature vectors `[k × d_model]` for every patch in the set.
pub fn extract_mfv<T: Scalar>(ex: &FeatureExtractor, params: &Params<T>, set: &PatchSet) -> Result<Vec<Tensor<T>>> {
    if set.rescale_dim != ex.config.input_dim {
        return Err(Error::Config(format!(
            "patches are {}px but the extractor expects {}px",
            set.rescale_dim, ex.config.input_dim
        )));
    }
    let mut tape = Tape::new();
    let x = patch_batch(&mut tape, set);
    let feats = ex.forward(&mut tape, params, x)?;
    Ok(split_mfv(tape.value(feats), ex.count(), set.len()))
}

/// Regroups sub-module-major `[k·P × d]` rows into per-patch `[k × d]` tensors.
pub fn split_mfv<T: Scalar>(feats: &Tensor<T>, k: usize, p: usize) -> Vec<Tensor<T>> {
    let d = feats.cols();
    (0..p)
        .map(|i| {
            let mut rows = Vec::with_capacity(k * d);
            for j in 0..k {
                rows.extend_from_slice(feats.row(j * p + i));
            }
            Tensor::new(&[k, d], rows).expect("mfv shape")
        })
        .collect()
}
