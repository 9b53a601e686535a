//! Training loop over a directory of PNG images.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::optim::Adam;
use crate::params::Params;
use crate::pretext::{train_step, Model, StepLosses, TrainConfig};
use crate::rng::Rng;

pub const METRICS_HEADER: &str = "step,total_loss,recon_loss,div_loss";
pub const CHECKPOINT_FILE: &str = "checkpoint.hsgt";
pub const OPTIMIZER_FILE: &str = "optimizer.hsgt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Stream offset separating epoch shuffles from per-step streams.
const EPOCH_STREAM: u64 = 1 << 40;

/// Loads every `.png` in `dir` (sorted by file name). Unreadable files and
/// images smaller than `min_side` are skipped with a warning.
pub fn load_dataset(dir: &Path, min_side: usize) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        match ImageBuffer::load_png(&path) {
            Ok(img) if img.width().min(img.height()) >= min_side => images.push(img),
            Ok(img) => log::warn!(
                "skipping {}: {}x{} is below the {min_side}-pixel minimum",
                path.display(),
                img.width(),
                img.height()
            ),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no usable PNG images in {}", dir.display())));
    }
    Ok(images)
}

/// Smallest image side accepted for a grid of `k` levels.
pub fn min_image_side(k: usize) -> usize {
    (1usize << (k - 1)) * 4
}

/// Dataset indices used at `step` (1-based). Each epoch is a seeded shuffle,
/// so any step's batch can be recomputed without replaying earlier ones.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let (epoch, pos) = ((step - 1) / per_epoch, (step - 1) % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(EPOCH_STREAM + epoch as u64).shuffle(&mut order);
    order[pos * batch..((pos + 1) * batch).min(n)].to_vec()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Losses of the steps run by this call.
    pub history: Vec<(usize, StepLosses)>,
    pub final_step: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn metrics_row(step: usize, l: &StepLosses) -> String {
    format!("{step},{},{},{}", l.total, l.recon, l.divergence)
}

/// Keeps the header and rows up to `step`, dropping rows written after the last checkpoint.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Data(format!("{} has an unexpected header", path.display())));
            }
        } else {
            let row_step: usize = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad row {}", path.display(), i + 1)))?;
            if row_step > step {
                break;
            }
        }
        kept.push(line);
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` total steps, writing the latest checkpoint, optimizer
/// state and metrics CSV into `out_dir`. With `resume`, state is restored
/// from `out_dir` and numbering continues after the saved step.
pub fn train_loop(
    model: &Model,
    params: &mut Params<f32>,
    images: &[ImageBuffer],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let opt_path = out_dir.join(OPTIMIZER_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut opt = Adam::new(cfg.optimizer, params);
    if resume {
        checkpoint::load_params(&ck_path, params)?;
        checkpoint::load_optimizer(&opt_path, &mut opt, params)?;
        opt.config = cfg.optimizer;
        truncate_metrics(&metrics_path, opt.step as usize)?;
        log::info!("resuming after step {}", opt.step);
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let start = opt.step as usize + 1;
    let mut history = Vec::new();
    let base = Rng::new(cfg.seed);
    for step in start..=cfg.steps {
        let batch: Vec<ImageBuffer> = batch_indices(images.len(), cfg.batch_size, cfg.seed, step)
            .into_iter()
            .map(|i| images[i].clone())
            .collect();
        let mut rng = base.fork(step as u64);
        let losses = train_step(model, params, &mut opt, &batch, cfg, &mut rng)
            .map_err(|e| match e {
                Error::NonFinite(d) => Error::NonFinite(format!("step {step}: {d}")),
                other => other,
            })?;
        writeln!(metrics, "{}", metrics_row(step, &losses)).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "step {step}: total {:.6} recon {:.6} div {:.6}",
            losses.total,
            losses.recon,
            losses.divergence
        );
        history.push((step, losses));
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            checkpoint::save_params(&ck_path, params)?;
            checkpoint::save_optimizer(&opt_path, &opt, params)?;
        }
    }
    Ok(TrainOutcome {
        history,
        final_step: cfg.steps.max(start - 1),
        checkpoint: ck_path,
        metrics: metrics_path,
    })
}
