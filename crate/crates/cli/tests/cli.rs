use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use actpaint_core::image::RgbImage;

fn actpaint(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actpaint"))
        .current_dir(dir)
        .env_remove("ACTPAINT_CACHE")
        .args(args)
        .output()
        .expect("spawn actpaint")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = actpaint(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Relative path -> bytes for every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn subdir(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_exits_zero_and_documents_flags() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&top.stdout);
    for word in ["generate", "visualize", "scan", "sweep", "invert", "paint", "serve", "--config", "--jobs"] {
        assert!(text.contains(word), "top-level help lacks {word}");
    }
    let scan = ok(dir.path(), &["scan", "--help"]);
    let text = String::from_utf8_lossy(&scan.stdout);
    for flag in ["--samples", "--grid", "--seed", "--layer", "--feature-layer", "--out"] {
        assert!(text.contains(flag), "scan help lacks {flag}");
    }
}

#[test]
fn invalid_invocations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&actpaint(p, &["--bogus"])), 1);
    assert_eq!(code(&actpaint(p, &[])), 1);
    assert_eq!(code(&actpaint(p, &["generate", "--generator", "no-such-bundle", "--out", "o"])), 1);
    assert_eq!(code(&actpaint(p, &["scan", "--layer", "no.such.layer", "--out", "o"])), 1);
    assert_eq!(code(&actpaint(p, &["scan", "--samples", "0", "--out", "o"])), 1);
    assert_eq!(code(&actpaint(p, &["visualize", "--vector", "extract:0:up2.conv1:999:0", "--out", "o"])), 1);
    assert_eq!(code(&actpaint(p, &["visualize", "--vector", "missing.json#v1", "--out", "o"])), 1);
    assert_eq!(code(&actpaint(p, &["--config", "missing.json"])), 1);
    std::fs::write(p.join("c.json"), r#"{"command":"generate","out":"x"}"#).unwrap();
    assert_eq!(code(&actpaint(p, &["--config", "c.json", "generate", "--out", "y"])), 1);
}

#[test]
fn generate_reruns_and_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (first, second) = (subdir(p, "first"), subdir(p, "second"));
    ok(&first, &["generate", "--seeds", "3,4", "--out", "a"]);
    ok(&second, &["generate", "--seeds", "3,4", "--out", "a"]);
    assert_eq!(tree(&first.join("a")), tree(&second.join("a")));
    let files: Vec<_> = tree(&first.join("a")).into_iter().map(|(f, _)| f).collect();
    assert_eq!(files, [PathBuf::from("config.json"), "seed_3.png".into(), "seed_4.png".into()]);

    let before = tree(&first.join("a"));
    std::fs::remove_file(first.join("a/seed_3.png")).ok();
    ok(&first, &["--config", "a/config.json"]);
    assert_eq!(tree(&first.join("a")), before);
}

#[test]
fn scan_output_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (a, b) = (subdir(p, "one"), subdir(p, "three"));
    ok(&a, &["--jobs", "1", "scan", "--samples", "6", "--seed", "5", "--out", "s"]);
    ok(&b, &["--jobs", "3", "scan", "--samples", "6", "--seed", "5", "--out", "s"]);
    let (one, three) = (tree(&a.join("s")), tree(&b.join("s")));
    assert_eq!(one, three);
    let names: Vec<_> = one.iter().map(|(f, _)| f.to_string_lossy().into_owned()).collect();
    for required in ["config.json", "report.json", "report.csv", "top4.png", "bottom4.png"] {
        assert!(names.iter().any(|n| n == required), "missing {required}");
    }
    let csv = String::from_utf8(one.iter().find(|(f, _)| f == Path::new("report.csv")).unwrap().1.clone()).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let config: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("s/config.json")).unwrap()).unwrap();
    assert_eq!(config["extractor_resize"], "nearest");
    assert_eq!(config["samples"], 6);
}

#[test]
fn visualize_writes_one_image_per_grid_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["visualize", "--vector", "extract:2:up2.conv1:1:1", "--grids", "3,0,1", "--out", "v"]);
    let names: Vec<_> = tree(&p.join("v")).into_iter().map(|(f, _)| f.to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["00_grid3.png", "01_full.png", "02_grid1.png", "config.json", "strip.png"]);
}

#[test]
fn invert_records_every_iterate_and_appends_to_library() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["invert", "--steps", "5", "--grid", "2", "--library", "lib.json", "--out", "i"]);
    let curve = std::fs::read_to_string(p.join("i/loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 6);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("i/report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["loss_curve"].as_array().unwrap().len(), 6);
    let lib: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("lib.json")).unwrap()).unwrap();
    assert_eq!(lib["vectors"].as_array().unwrap().len(), 2);

    // The stored vectors are usable as references.
    let id = lib["vectors"][0]["id"].as_str().unwrap().to_string();
    ok(p, &["visualize", "--vector", &format!("lib.json#{id}"), "--grids", "2", "--out", "v"]);
}

#[test]
fn sweep_writes_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = ok(
        p,
        &["sweep", "--sizes", "0,2", "--targets", "2", "--repeats", "1", "--steps", "3", "--out", "sw"],
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary.is_object());
    let csv = std::fs::read_to_string(p.join("sw/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().next().unwrap().contains("mean_cosine"));
}

fn write_mask(path: &Path, size: usize, painted: bool) {
    let mut img = RgbImage::filled(size, size, [0, 255, 0]);
    if painted {
        for y in 0..size {
            for x in 0..size / 2 {
                img.put(x, y, [255, 0, 0]);
            }
        }
    }
    img.save_png(path).unwrap();
}

fn write_palette(path: &Path, label: u32) {
    let palette = serde_json::json!({
        "entries": [{ "label": label, "color": [255, 0, 0], "vector": "extract:9:up1.conv1:2:2" }]
    });
    std::fs::write(path, serde_json::to_string(&palette).unwrap()).unwrap();
}

#[test]
fn paint_changes_only_painted_runs_and_keep_mask_is_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_mask(&p.join("half.png"), 64, true);
    write_mask(&p.join("keep.png"), 64, false);
    write_palette(&p.join("palette.json"), 1);
    ok(p, &["generate", "--seeds", "0,1", "--out", "base"]);
    ok(p, &["paint", "--mask", "half.png", "--palette", "palette.json", "--seeds", "0,1", "--out", "half"]);
    ok(p, &["paint", "--mask", "keep.png", "--palette", "palette.json", "--seeds", "0,1", "--out", "keep"]);
    for seed in [0, 1] {
        let name = format!("seed_{seed}.png");
        let base = std::fs::read(p.join("base").join(&name)).unwrap();
        assert_eq!(std::fs::read(p.join("keep").join(&name)).unwrap(), base);
        assert_ne!(std::fs::read(p.join("half").join(&name)).unwrap(), base);
    }
    let labels: Vec<Vec<u32>> = serde_json::from_slice(&std::fs::read(p.join("half/labels.json")).unwrap()).unwrap();
    assert!(labels.iter().all(|row| row[0] == 1 && *row.last().unwrap() == 0));

    write_palette(&p.join("zero.json"), 0);
    assert_eq!(code(&actpaint(p, &["paint", "--mask", "half.png", "--palette", "zero.json", "--out", "z"])), 1);
}

#[test]
fn paint_rejects_colors_outside_the_palette() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut img = RgbImage::filled(8, 8, [0, 255, 0]);
    img.put(0, 0, [1, 2, 3]);
    img.save_png(p.join("m.png")).unwrap();
    write_palette(&p.join("palette.json"), 1);
    assert_eq!(code(&actpaint(p, &["paint", "--mask", "m.png", "--palette", "palette.json", "--out", "o"])), 1);
}
