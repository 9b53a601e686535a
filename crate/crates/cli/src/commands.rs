//! Subcommand implementations. Every output file is a pure function of the
//! flags, inputs and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hindsight_core::checkpoint;
use hindsight_core::checks::{run_suite, SuiteOptions};
use hindsight_core::graph::encode as encode_image;
use hindsight_core::image::{ImageBuffer, Rect};
use hindsight_core::patches::{dynamic_grid, static_grid, GridMode, PatchSet};
use hindsight_core::pretext::{apply_mask, mask_at_level, Model};
use hindsight_core::train::{load_dataset, min_image_side, train_loop};
use hindsight_core::{Params, Rng};

use crate::config::RunConfig;
use crate::{CliError, EncodeArgs, GradcheckArgs, GridArgs, MaskArgs, TrainArgs};

pub const MANIFEST: &str = "manifest.txt";
pub const MASKED_PNG: &str = "masked.png";

const OVERLAY_RGB: [f32; 3] = [1.0, 0.1, 0.1];

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(path)?)
}

/// One-pixel outline of `r`.
fn draw_outline(img: &mut ImageBuffer, r: &Rect, rgb: [f32; 3]) {
    if r.width == 0 || r.height == 0 {
        return;
    }
    let (x1, y1) = (r.x + r.width - 1, r.y + r.height - 1);
    for (c, &v) in rgb.iter().enumerate() {
        for x in r.x..=x1 {
            img.set(c, r.y, x, v);
            img.set(c, y1, x, v);
        }
        for y in r.y..=y1 {
            img.set(c, y, r.x, v);
            img.set(c, y, x1, v);
        }
    }
}

pub fn grid(args: &GridArgs) -> Result<(), CliError> {
    if args.k < 1 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if args.mode == GridMode::Dynamic && args.divisions.is_none() {
        return Err(CliError::Usage("dynamic mode needs --D".into()));
    }
    let image = ImageBuffer::load_png(&args.image)?;
    let mut manifest = String::new();
    let set: PatchSet = match args.mode {
        GridMode::Static => {
            let _ = writeln!(manifest, "mode = static\nk = {}", args.k);
            static_grid(&image, args.k, args.rescale)?
        }
        GridMode::Dynamic => {
            let d = args.divisions.unwrap_or(0);
            let g = dynamic_grid(&image, args.k, d, args.rescale)?;
            let _ = writeln!(
                manifest,
                "mode = dynamic\nk = {}\nD = {d}\ndivisions_performed = {}",
                args.k, g.divisions_performed
            );
            g.patches
        }
    };
    let counts = set.level_counts();
    let _ = writeln!(manifest, "P = {}", set.len());
    for (i, c) in counts.iter().enumerate() {
        let _ = writeln!(manifest, "level_{} = {c}", i + 1);
    }
    create_dir(&args.out)?;
    for level in 1..=counts.len() {
        let mut overlay = image.clone();
        for (meta, region) in set.meta.iter().zip(&set.regions) {
            if meta.level == level {
                draw_outline(&mut overlay, region, OVERLAY_RGB);
            }
        }
        overlay.save_png(args.out.join(format!("level_{level}.png")))?;
    }
    write_file(&args.out.join(MANIFEST), &manifest)?;
    println!("P = {} ({})", set.len(), counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" + "));
    Ok(())
}

pub fn mask(args: &MaskArgs) -> Result<(), CliError> {
    let image = ImageBuffer::load_png(&args.image)?;
    let mut rng = Rng::new(args.seed);
    let spec = mask_at_level(args.k, args.level, args.fraction, &mut rng)?;
    let regions = spec.regions(&image);
    let mut manifest = format!(
        "k = {}\nlevel = {}\nfraction = {}\nseed = {}\ncells = {}\n",
        spec.k,
        spec.level,
        spec.fraction,
        args.seed,
        spec.cells.len()
    );
    for (cell, r) in spec.cells.iter().zip(&regions) {
        let _ = writeln!(manifest, "rect = {cell} {} {} {} {}", r.x, r.y, r.width, r.height);
    }
    let _ = writeln!(manifest, "fully_masked = {}", spec.fully_masked.len());
    create_dir(&args.out)?;
    apply_mask(&image, &regions).save_png(args.out.join(MASKED_PNG))?;
    write_file(&args.out.join(MANIFEST), &manifest)?;
    println!("fully masked patches: {}", spec.fully_masked.len());
    Ok(())
}

/// Builds the model described by `config` with seed-initialised weights.
fn build_model(config: &RunConfig) -> Result<(Model, Params<f32>), CliError> {
    let model_cfg = config.model()?;
    let mut params = Params::new();
    let mut rng = Rng::new(config.seed()?);
    let model = Model::build(model_cfg, &mut params, &mut rng)?;
    Ok((model, params))
}

pub fn encode(args: &EncodeArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let (model, mut params) = build_model(&config)?;
    checkpoint::load_params(&args.checkpoint, &mut params)?;
    let image = ImageBuffer::load_png(&args.image)?;
    let out = encode_image(&image, &model.encoder, &params)?;
    let k = model.encoder.extractor.count();
    let d = model.config().d_model;
    let mut csv = String::from("level,x,y,A");
    for j in 0..k {
        let _ = write!(csv, ",gate_{j}");
    }
    for j in 0..d {
        let _ = write!(csv, ",h_{j}");
    }
    csv.push('\n');
    for (i, meta) in out.patches.meta.iter().enumerate() {
        let _ = write!(csv, "{},{},{},{}", meta.level, meta.x, meta.y, meta.area_coverage);
        for v in out.gates[i].data().iter().chain(out.graph.row(i)) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&args.out, &csv)?;
    println!("{} patches x {} columns", out.patches.len(), 4 + k + d);
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let model = config.model()?;
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        seed: args.seed.map_or_else(|| config.seed(), Ok)?,
        image_side: defaults.image_side.max(min_image_side(model.grid.levels)),
        corrupt_analytic: args.corrupt_gradient,
        ..defaults
    };
    let results = run_suite(&model, &opts)?;
    println!(
        "{:<24} {:>12} {:>9} {:>8} {:>10} {:>7}  status",
        "component", "max_rel_err", "tol", "checked", "unresolved", "kinks"
    );
    let mut failed = Vec::new();
    for c in &results {
        let ok = c.passed();
        println!(
            "{:<24} {:>12.3e} {:>9.0e} {:>8} {:>10} {:>7}  {}",
            c.name,
            c.max_rel_error(),
            c.tolerance,
            c.report.checked(),
            c.report.unresolved(),
            c.report.skipped(),
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(match c.report.worst() {
                Some(w) => format!("{} (worst parameter `{}`)", c.name, w.name),
                None => c.name.clone(),
            });
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let train_cfg = config.train()?;
    let (model, mut params) = build_model(&config)?;
    let images = load_dataset(&args.data, min_image_side(model.config().grid.levels))?;
    log::info!("{} training images, {} parameters", images.len(), params.len());
    let outcome = train_loop(&model, &mut params, &images, &train_cfg, &args.out, args.resume)?;
    match (outcome.history.first(), outcome.history.last()) {
        (Some((s0, first)), Some((s1, last))) => println!(
            "steps {s0}..={s1}: recon {:.6} -> {:.6}, total {:.6} -> {:.6}",
            first.recon, last.recon, first.total, last.total
        ),
        _ => println!("nothing to do: already at step {}", outcome.final_step),
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}
