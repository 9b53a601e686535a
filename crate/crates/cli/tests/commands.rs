use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hindsight_core::checks::desk_image;

fn hindsight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hindsight"))
        .args(args)
        .output()
        .expect("spawn hindsight")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn write_png(dir: &Path, name: &str, side: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    desk_image(side, seed).save_png(&path).unwrap();
    path
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{key}` in manifest:\n{text}"))
}

#[test]
fn grid_static_manifest_and_overlays() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_png(tmp.path(), "img.png", 64, 1);
    let out = tmp.path().join("grid");
    let o = hindsight(&["grid", "--image", s(&img), "--mode", "static", "--k", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest_value(&out, "P"), "341");
    assert_eq!(manifest_value(&out, "level_5"), "256");
    for l in 1..=5 {
        assert!(out.join(format!("level_{l}.png")).exists());
    }
}

#[test]
fn grid_single_level_outlines_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_png(tmp.path(), "img.png", 20, 2);
    let out = tmp.path().join("grid");
    let o = hindsight(&["grid", "--image", s(&img), "--k", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest_value(&out, "P"), "1");
    let overlay = hindsight_core::image::ImageBuffer::load_png(out.join("level_1.png")).unwrap();
    let red = |x: usize, y: usize| overlay.get(0, y, x) == 1.0;
    assert!(red(0, 0) && red(19, 19) && red(10, 0) && red(0, 10));
    assert!(!out.join("level_2.png").exists());
}

#[test]
fn grid_dynamic_matches_division_count() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_png(tmp.path(), "img.png", 128, 3);
    let out = tmp.path().join("grid");
    let o = hindsight(&["grid", "--image", s(&img), "--mode", "dynamic", "--k", "6", "--D", "85", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest_value(&out, "P"), "341");
    assert_eq!(manifest_value(&out, "divisions_performed"), "85");
}

#[test]
fn grid_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_png(tmp.path(), "img.png", 16, 4);
    let out = tmp.path().join("g");
    assert_eq!(code(&hindsight(&["grid", "--image", s(&img), "--k", "2", "--mode", "diagonal", "--out", s(&out)])), 1);
    assert_eq!(code(&hindsight(&["grid", "--image", s(&img), "--k", "2", "--mode", "dynamic", "--out", s(&out)])), 1);
    assert_eq!(code(&hindsight(&["grid", "--image", s(&img), "--k", "9", "--out", s(&out)])), 1);
    assert_eq!(code(&hindsight(&["grid", "--image", "/nonexistent.png", "--k", "2", "--out", s(&out)])), 2);
}

#[test]
fn mask_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_png(tmp.path(), "img.png", 64, 5);
    for (level, want) in [("2", "85"), ("3", "84"), ("5", "64")] {
        let out = tmp.path().join(format!("mask{level}"));
        let o = hindsight(&["mask", "--image", s(&img), "--k", "5", "--level", level, "--fraction", "0.25", "--seed", "3", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(manifest_value(&out, "fully_masked"), want);
    }
    let again = tmp.path().join("again");
    hindsight(&["mask", "--image", s(&img), "--k", "5", "--level", "3", "--fraction", "0.25", "--seed", "3", "--out", s(&again)]);
    let first = tmp.path().join("mask3");
    for f in ["masked.png", "manifest.txt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
    let text = fs::read_to_string(first.join("manifest.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("rect = ")).count(), 4);
}

#[test]
fn mask_level_out_of_range_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_png(tmp.path(), "img.png", 32, 6);
    let out = tmp.path().join("m");
    for level in ["1", "6"] {
        let o = hindsight(&["mask", "--image", s(&img), "--k", "5", "--level", level, "--out", s(&out)]);
        assert_eq!(code(&o), 1);
    }
}

fn train_desk(dir: &Path, steps: usize, resume: bool) -> Output {
    let data = dir.join("data");
    if !data.exists() {
        fs::create_dir_all(&data).unwrap();
        for i in 0..3 {
            write_png(&data, &format!("img{i}.png"), 24, 10 + i);
        }
    }
    let conf = dir.join(format!("train{steps}.conf"));
    let mut text = fs::read_to_string(desk_config()).unwrap();
    text = text.replace("steps = 5", &format!("steps = {steps}"));
    fs::write(&conf, text).unwrap();
    let out = dir.join("run");
    let mut args = vec!["train", "--data", s(&data), "--config", s(&conf), "--out", s(&out)];
    if resume {
        args.push("--resume");
    }
    hindsight(&args)
}

#[test]
fn train_one_step_then_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train_desk(tmp.path(), 1, false);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
    assert!(run.join("checkpoint.hsgt").exists());

    let o = train_desk(tmp.path(), 3, true);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3"]);
}

#[test]
fn train_without_images_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = hindsight(&["train", "--data", s(&empty), "--config", s(&desk_config()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "k = 2\nH = 8\n# comment\nwidth = 3\n").unwrap();
    let o = hindsight(&["gradcheck", "--config", s(&conf)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
    fs::write(&conf, "k = 2\nH = 8\n").unwrap();
    let o = hindsight(&["gradcheck", "--config", s(&conf)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_model"));
}

#[test]
fn encode_dump_shape_determinism_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_desk(tmp.path(), 1, false)), 0);
    let ck = tmp.path().join("run/checkpoint.hsgt");
    let img = write_png(tmp.path(), "img.png", 32, 20);
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for out in [&a, &b] {
        let o = hindsight(&["encode", "--image", s(&img), "--config", s(&desk_config()), "--checkpoint", s(&ck), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines.iter().all(|l| l.split(',').count() == 4 + 2 + 16));
    assert!(lines[0].starts_with("level,x,y,A,gate_0,gate_1,h_0"));

    let conf = tmp.path().join("wide.conf");
    let text = fs::read_to_string(desk_config()).unwrap().replace("d_ff = 32", "d_ff = 24");
    fs::write(&conf, text).unwrap();
    let o = hindsight(&["encode", "--image", s(&img), "--config", s(&conf), "--checkpoint", s(&ck), "--out", s(&a)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("graph.0.ffn.0.weight"));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = hindsight(&["gradcheck", "--config", s(&desk_config()), "--seed", "1"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    let rows = stdout.lines().skip(1).filter(|l| l.trim_end().ends_with("ok")).count();
    assert!(rows >= 6, "{stdout}");

    let o = hindsight(&["gradcheck", "--config", s(&desk_config()), "--corrupt-gradient"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("matmul"));
}
