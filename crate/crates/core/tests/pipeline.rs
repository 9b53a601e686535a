use hindsight_core::checkpoint::{load_params, save_params};
use hindsight_core::checks::desk_image;
use hindsight_core::encoding::{EncoderConfig, EncoderVariant};
use hindsight_core::extractor::{extract_fv, extract_mfv, shift_sensitivity, ExtractorConfig, FeatureExtractor};
use hindsight_core::graph::{encode, GraphConfig, ModelConfig};
use hindsight_core::optim::AdamConfig;
use hindsight_core::patches::{static_grid, GridConfig, GridMode};
use hindsight_core::pretext::{Model, TrainConfig};
use hindsight_core::train::{load_dataset, train_loop, METRICS_HEADER};
use hindsight_core::{Error, Params, Rng, Tensor};

fn config(mode: GridMode, variant: EncoderVariant) -> ModelConfig {
    ModelConfig {
        grid: GridConfig {
            mode,
            levels: 2,
            divisions: 3,
            rescale: 8,
        },
        extractors: 2,
        d_model: 16,
        encoding: EncoderConfig {
            variant,
            d_model: 16,
            lambda: if variant == EncoderVariant::Periodic { 10.0 } else { 1.0 },
        },
        graph: GraphConfig {
            layers: 2,
            heads: 2,
            d_ff: 32,
            agg_period: 2,
        },
        decoder_layers: 1,
    }
}

fn extractor(count: usize, h: usize, d: usize, seed: u64) -> (FeatureExtractor, Params<f64>) {
    let mut params = Params::new();
    let ex = FeatureExtractor::build(
        ExtractorConfig {
            count,
            input_dim: h,
            d_model: d,
        },
        &mut params,
        &mut Rng::new(seed),
    )
    .unwrap();
    (ex, params)
}

#[test]
fn mfv_shape_for_three_level_grid() {
    let (ex, params) = extractor(3, 16, 64, 1);
    let set = static_grid(&desk_image(48, 2), 3, 16).unwrap();
    let mfv = extract_mfv(&ex, &params, &set).unwrap();
    assert_eq!(mfv.len(), 21);
    assert!(mfv.iter().all(|m| m.shape() == [3, 64]));
}

#[test]
fn single_extractor_row_equals_fv() {
    let (ex, params) = extractor(1, 8, 16, 4);
    let set = static_grid(&desk_image(16, 3), 2, 8).unwrap();
    let mfv = extract_mfv(&ex, &params, &set).unwrap();
    for (m, patch) in mfv.iter().zip(&set.patches) {
        let fv = extract_fv(&ex, &params, 0, &patch.cast()).unwrap();
        assert_eq!(m.row(0), fv.data());
    }
}

#[test]
fn identical_submodules_give_identical_rows() {
    let (ex, mut params) = extractor(2, 8, 16, 5);
    let copies: Vec<(String, Tensor<f64>)> = params
        .iter()
        .filter(|p| p.name.starts_with("extractor.0."))
        .map(|p| (p.name.replacen("extractor.0.", "extractor.1.", 1), p.value.clone()))
        .collect();
    for (name, value) in copies {
        params.set_value(&name, value).unwrap();
    }
    let set = static_grid(&desk_image(16, 6), 2, 8).unwrap();
    for m in extract_mfv(&ex, &params, &set).unwrap() {
        assert_eq!(m.row(0), m.row(1));
    }
}

#[test]
fn perturbing_one_submodule_changes_only_its_row() {
    let (ex, params) = extractor(3, 8, 16, 7);
    let set = static_grid(&desk_image(16, 8), 2, 8).unwrap();
    let before = extract_mfv(&ex, &params, &set).unwrap();
    let mut bumped = params.clone();
    for p in bumped.iter_mut().filter(|p| p.name.starts_with("extractor.1.")) {
        p.value = p.value.map(|v| v * 1.5 + 0.01);
    }
    let after = extract_mfv(&ex, &bumped, &set).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.row(0), a.row(0));
        assert_ne!(b.row(1), a.row(1));
        assert_eq!(b.row(2), a.row(2));
    }
}

#[test]
fn shift_sensitivity_is_measured() {
    let h = 32;
    let (ex, params) = extractor(1, h, 16, 10);
    let mut rng = Rng::new(11);
    let mut data = vec![0.0; 3 * h * h];
    for c in 0..3 {
        for y in 8..h - 8 {
            for x in 8..h - 8 {
                data[(c * h + y) * h + x] = rng.uniform(0.0, 1.0);
            }
        }
    }
    let patch = Tensor::new(&[3, h, h], data).unwrap();
    let zero = shift_sensitivity(&ex, &params, 0, &patch, 0, 0).unwrap();
    let moved = shift_sensitivity(&ex, &params, 0, &patch, 2, 2).unwrap();
    println!("relative change of the 1x1 conv feature under a 2-pixel shift: {moved:.4}");
    assert_eq!(zero, 0.0);
    assert!(moved.is_finite() && moved > 0.0);
}

#[test]
fn every_variant_and_mode_encodes() {
    let img = desk_image(32, 12);
    for mode in [GridMode::Static, GridMode::Dynamic] {
        for variant in [EncoderVariant::Trainable, EncoderVariant::Periodic, EncoderVariant::TrainablePeriodic] {
            let mut params = Params::<f32>::new();
            let model = Model::build(config(mode, variant), &mut params, &mut Rng::new(3)).unwrap();
            let out = encode(&img, &model.encoder, &params).unwrap();
            let p = out.patches.len();
            assert_eq!(out.graph.shape(), &[p, 16], "{mode:?} {variant}");
            assert!(out.graph.all_finite());
            assert_eq!(out.gates.len(), p);
        }
    }
}

#[test]
fn model_checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hsgt");
    let cfg = config(GridMode::Static, EncoderVariant::TrainablePeriodic);
    let mut params = Params::<f32>::new();
    Model::build(cfg.clone(), &mut params, &mut Rng::new(1)).unwrap();
    save_params(&path, &params).unwrap();

    let mut other = Params::<f32>::new();
    Model::build(cfg.clone(), &mut other, &mut Rng::new(2)).unwrap();
    load_params(&path, &mut other).unwrap();
    for (a, b) in params.iter().zip(other.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }

    let mut wider = cfg;
    wider.graph.d_ff = 48;
    let mut mismatched = Params::<f32>::new();
    Model::build(wider, &mut mismatched, &mut Rng::new(1)).unwrap();
    match load_params(&path, &mut mismatched) {
        Err(Error::Parameter { name, .. }) => assert_eq!(name, "graph.0.ffn.0.weight"),
        other => panic!("{other:?}"),
    }
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        optimizer: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        steps,
        batch_size: 2,
        seed: 5,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = config(GridMode::Static, EncoderVariant::TrainablePeriodic);
    let images: Vec<_> = (0..3).map(|i| desk_image(24, i)).collect();
    let fresh = || {
        let mut params = Params::<f32>::new();
        let model = Model::build(cfg.clone(), &mut params, &mut Rng::new(5)).unwrap();
        (model, params)
    };

    let straight = tempfile::tempdir().unwrap();
    let (model, mut params) = fresh();
    let out = train_loop(&model, &mut params, &images, &train_cfg(5), straight.path(), false).unwrap();
    assert_eq!(out.history.len(), 5);

    let split = tempfile::tempdir().unwrap();
    let (model, mut params) = fresh();
    train_loop(&model, &mut params, &images, &train_cfg(3), split.path(), false).unwrap();
    // Rows after the last checkpoint are discarded on resume, as if the run had crashed.
    let metrics = split.path().join("metrics.csv");
    let mut text = std::fs::read_to_string(&metrics).unwrap();
    text.push_str("4,9,9,9\n");
    std::fs::write(&metrics, text).unwrap();
    let (model, mut params) = fresh();
    let resumed = train_loop(&model, &mut params, &images, &train_cfg(5), split.path(), true).unwrap();
    assert_eq!(resumed.history.first().unwrap().0, 4);
    assert_eq!(resumed.final_step, 5);

    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(straight.path(), "metrics.csv"), read(split.path(), "metrics.csv"));
    assert_eq!(read(straight.path(), "checkpoint.hsgt"), read(split.path(), "checkpoint.hsgt"));
    let csv = String::from_utf8(read(split.path(), "metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn dataset_loader_skips_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    desk_image(32, 1).save_png(dir.path().join("b.png")).unwrap();
    desk_image(8, 2).save_png(dir.path().join("a_small.png")).unwrap();
    std::fs::write(dir.path().join("c.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let images = load_dataset(dir.path(), 16).unwrap();
    assert_eq!(images.len(), 1);
    assert_eq!(images[0].width(), 32);

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(empty.path(), 16), Err(Error::Data(_))));
}
