//! Gradient-check suite over every differentiable component.
//!
//! Each component is reduced to a scalar with a fixed random probe
//! `Σ out ⊙ R` rather than a plain sum: sums of softmax or post-norm outputs
//! are constant and would leave nothing to check.

use crate::aggregator::{divergence_loss_var, Aggregator};
use crate::autodiff::{Tape, Var};
use crate::encoding::{EncoderConfig, EncoderVariant, PosScaleEncoder};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, FeatureExtractor};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Encoder, GraphLayer, ModelConfig};
use crate::image::ImageBuffer;
use crate::kernels::LAYER_NORM_EPS;
use crate::nn::MultiHeadAttention;
use crate::params::Params;
use crate::patches::PatchMeta;
use crate::pretext::{mask_at_level, pretext_objective, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    pub step: f64,
    /// Cap on checked elements per parameter for model-sized components.
    pub max_elements_per_param: usize,
    /// Side of the synthetic square image for image-level components.
    pub image_side: usize,
    pub corrupt_analytic: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-4,
            max_elements_per_param: 4,
            image_side: 64,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl ComponentCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error()
    }

    pub fn passed(&self) -> bool {
        self.report.checked() > 0 && self.max_rel_error() < self.tolerance
    }
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
    Tensor::new(shape, data).expect("random tensor shape")
}

/// `Σ out ⊙ R` for a fixed random `R` of matching shape.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(random(&mut Rng::new(seed), &shape, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Synthetic test image with smooth gradients and a disc.
pub fn desk_image(side: usize, seed: u64) -> ImageBuffer {
    let mut rng = Rng::new(seed);
    let (a, b, c) = (rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9));
    let s = side as f64;
    let (cx, cy, r) = (rng.uniform(0.3, 0.7) * s, rng.uniform(0.3, 0.7) * s, rng.uniform(0.15, 0.3) * s);
    ImageBuffer::from_fn(side, side, move |x, y| {
        let (fx, fy) = (x as f64 / s, y as f64 / s);
        let inside = (x as f64 - cx).hypot(y as f64 - cy) < r;
        let px = if inside {
            [1.0 - a, 1.0 - b, c]
        } else {
            [a * fx, b * fy, c * (1.0 - fx)]
        };
        px.map(|v| v as f32)
    })
}

struct Runner<'a> {
    opts: &'a SuiteOptions,
    out: Vec<ComponentCheck>,
}

impl Runner<'_> {
    fn check<F>(&mut self, name: &str, tolerance: f64, capped: bool, params: &Params<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &Params<f64>) -> Result<Var>,
    {
        let gopts = GradCheckOptions {
            step: self.opts.step,
            max_elements_per_param: capped.then_some(self.opts.max_elements_per_param),
            seed: self.opts.seed,
            resolve: Some(tolerance),
            corrupt_analytic: self.opts.corrupt_analytic,
        };
        let report = grad_check(params, &gopts, f).map_err(|e| Error::Data(format!("component {name}: {e}")))?;
        log::info!("gradcheck {name}: max relative error {:.3e}", report.max_rel_error());
        self.out.push(ComponentCheck {
            name: name.to_string(),
            tolerance,
            report,
        });
        Ok(())
    }
}

/// Runs every component check; `config` fixes the model-sized components.
pub fn run_suite(config: &ModelConfig, opts: &SuiteOptions) -> Result<Vec<ComponentCheck>> {
    config.validate()?;
    let mut rng = Rng::new(opts.seed);
    let mut run = Runner { opts, out: Vec::new() };
    let seed = opts.seed;

    let mut p = Params::new();
    let a = p.add("a", random(&mut rng, &[3, 4], 1.0))?;
    let b = p.add("b", random(&mut rng, &[4, 2], 1.0))?;
    run.check("matmul", OP_TOLERANCE, false, &p, |t, p| {
        let (a, b) = (t.param(p, a), t.param(p, b));
        let y = t.matmul(a, b)?;
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let x = p.add("input", random(&mut rng, &[2, 6, 6], 1.0))?;
    let k = p.add("kernels", random(&mut rng, &[3, 2, 3, 3], 0.5))?;
    let bias = p.add("bias", random(&mut rng, &[3], 0.5))?;
    run.check("conv2d_valid", OP_TOLERANCE, false, &p, |t, p| {
        let (x, k, b) = (t.param(p, x), t.param(p, k), t.param(p, bias));
        let y = t.conv2d(x, k, b)?;
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let x = p.add("input", random(&mut rng, &[2, 4, 4], 1.0))?;
    run.check("maxpool2", OP_TOLERANCE, false, &p, |t, p| {
        let x = t.param(p, x);
        let y = t.maxpool2(x)?;
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let x = p.add("input", random(&mut rng, &[12], 1.0))?;
    run.check("relu", OP_TOLERANCE, false, &p, |t, p| {
        let x = t.param(p, x);
        let y = t.relu(x);
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let x = p.add("input", random(&mut rng, &[3, 5], 2.0))?;
    run.check("softmax", OP_TOLERANCE, false, &p, |t, p| {
        let x = t.param(p, x);
        let y = t.softmax(x);
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let x = p.add("input", random(&mut rng, &[3, 6], 1.0))?;
    let g = p.add("gain", random(&mut rng, &[6], 1.0))?;
    let s = p.add("shift", random(&mut rng, &[6], 1.0))?;
    run.check("layer_norm", OP_TOLERANCE, false, &p, |t, p| {
        let (x, g, s) = (t.param(p, x), t.param(p, g), t.param(p, s));
        let y = t.layer_norm(x, g, s, LAYER_NORM_EPS)?;
        probe(t, y, seed)
    })?;

    let d = config.d_model;
    let h = config.grid.rescale;
    let kx = config.extractors;

    let mut p = Params::new();
    let ex = FeatureExtractor::build(
        ExtractorConfig {
            count: kx,
            input_dim: h,
            d_model: d,
        },
        &mut p,
        &mut rng,
    )?;
    let patches = random(&mut rng, &[2, 3, h, h], 1.0).map(|v| 0.5 + 0.5 * v);
    run.check("feature_extractor", COMPOSITE_TOLERANCE, true, &p, |t, p| {
        let x = t.constant(patches.clone());
        let y = ex.forward(t, p, x)?;
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let agg = Aggregator::build(&mut p, d, &mut rng)?;
    let n_patches = 3;
    let feats = random(&mut rng, &[kx * n_patches, d], 1.0);
    let gq = random(&mut rng, &[n_patches, d], 1.0);
    run.check("aggregator+divergence", COMPOSITE_TOLERANCE, false, &p, |t, p| {
        let f = t.constant(feats.clone());
        let first = agg.forward(t, p, f, None, kx)?;
        let div = divergence_loss_var(t, first.gate)?;
        let s1 = t.sum(first.afv);
        let q = t.constant(gq.clone());
        let second = agg.forward(t, p, f, Some(q), kx)?;
        let s2 = probe(t, second.afv, seed)?;
        let l = t.add(div, s1)?;
        t.add(l, s2)
    })?;

    let metas: Vec<PatchMeta> = (0..5)
        .map(|i| PatchMeta {
            x: rng.uniform(-1.0, 1.0),
            y: rng.uniform(-1.0, 1.0),
            area_coverage: 1.0 - i as f64 * 0.4,
            level: 1 + i / 2,
        })
        .collect();
    for (variant, lambda) in [(EncoderVariant::Trainable, 1.0), (EncoderVariant::TrainablePeriodic, 1.0)] {
        let mut p = Params::new();
        let enc = PosScaleEncoder::build(
            EncoderConfig {
                variant,
                d_model: d,
                lambda,
            },
            &mut p,
            &mut rng,
        )?;
        run.check(&format!("posenc.{variant}"), OP_TOLERANCE, false, &p, |t, p| {
            let y = enc.forward(t, p, &metas)?;
            probe(t, y, seed)
        })?;
    }

    let mut p = Params::new();
    let mha = MultiHeadAttention::build(&mut p, "mha", d, config.graph.heads, &mut rng)?;
    let nodes = random(&mut rng, &[n_patches, d], 1.0);
    run.check("mha", COMPOSITE_TOLERANCE, true, &p, |t, p| {
        let x = t.constant(nodes.clone());
        let y = mha.forward(t, p, x, x)?;
        probe(t, y, seed)
    })?;

    let mut p = Params::new();
    let agg = Aggregator::build(&mut p, d, &mut rng)?;
    let layer = GraphLayer::build(&mut p, "graph.0", d, &config.graph, true, &mut rng)?;
    run.check("graph_layer", COMPOSITE_TOLERANCE, true, &p, |t, p| {
        let x = t.constant(nodes.clone());
        let f = t.constant(feats.clone());
        let y = layer.forward(t, p, x, Some((&agg, f, kx)))?;
        probe(t, y, seed)
    })?;

    let image = desk_image(opts.image_side, opts.seed);
    let set = config.grid.generate(&image)?;
    let mut p = Params::new();
    let encoder = Encoder::build(config.clone(), &mut p, &mut rng)?;
    run.check("encode", COMPOSITE_TOLERANCE, true, &p, |t, p| {
        let out = encoder.encode_patches(t, p, &set)?;
        probe(t, out.nodes, seed)
    })?;

    let mut p = Params::new();
    let model = Model::build(config.clone(), &mut p, &mut rng)?;
    let k = config.grid.levels;
    let mask = mask_at_level(k, 2, 0.25, &mut rng)?;
    let images = [image];
    let masks = [mask];
    run.check("pretext_step", END_TO_END_TOLERANCE, true, &p, |t, p| {
        Ok(pretext_objective(t, &model, p, &images, &masks, 0.1)?.total)
    })?;

    Ok(run.out)
}
