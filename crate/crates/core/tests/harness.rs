mod common;

use std::path::Path;
use std::process::Command as Process;

use dixray::harness::{read_map, run, Command, RunConfig, StoredMap, METRIC_COLUMNS};

fn setup(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    common::write_dataset(&dir.path().join("data"), n, 3);
    dir
}

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml(text).unwrap()
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn metric_csv_has_the_fixed_header() {
    let dir = setup(4);
    let cfg = config(&common::evaluate_toml("out", &["dix2"]));
    let summary = run(Command::Evaluate, &cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRIC_COLUMNS.join(","));
    assert_eq!(lines.count(), summary.metric_rows.len());
    assert!(summary.metric_rows.iter().all(|r| r.n_items == 4 && r.seed == 7), "{text}");
    assert!(summary.failures.is_empty());
    assert!(!dir.path().join("out/failures.csv").exists());
}

#[test]
fn deterministic_evaluate_is_byte_identical() {
    let dir = setup(4);
    let a = run(Command::Evaluate, &config(&common::evaluate_toml("a", &["dix2", "ig"])), dir.path()).unwrap();
    let b = run(Command::Evaluate, &config(&common::evaluate_toml("b", &["dix2", "ig"])), dir.path()).unwrap();
    let (fa, fb) = (files_under(&a.output_dir), files_under(&b.output_dir));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.iter().any(|p| p.extension().is_some_and(|e| e == "dixm")));
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a.output_dir).unwrap(), y.strip_prefix(&b.output_dir).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn explain_writes_one_map_and_overlay_per_image() {
    let dir = setup(1);
    let cfg = config(&common::evaluate_toml("out", &["dix3"]));
    let summary = run(Command::Explain, &cfg, dir.path()).unwrap();
    assert_eq!(summary.files.len(), 2, "{:?}", summary.files);
    let map = summary.files.iter().find(|p| p.extension().is_some_and(|e| e == "dixm")).unwrap();
    let stored = read_map(map).unwrap();
    assert_eq!((stored.height, stored.width), (8, 8));
    let png = summary.files.iter().find(|p| p.extension().is_some_and(|e| e == "png")).unwrap();
    assert_eq!(image::image_dimensions(png).unwrap(), (8, 8));
}

#[test]
fn unsupported_method_is_recorded_as_a_failure() {
    let dir = setup(2);
    let cfg = config(&common::evaluate_toml("out", &["dix2", "rollout"]));
    let summary = run(Command::Evaluate, &cfg, dir.path()).unwrap();
    assert!(summary.failures.iter().any(|f| f.method == "rollout"));
    assert!(summary.metric_rows.iter().any(|r| r.method == "dix2"));
    assert!(dir.path().join("out/failures.csv").exists());
    let clean = config(&common::evaluate_toml("out", &["dix2"]));
    run(Command::Evaluate, &clean, dir.path()).unwrap();
    assert!(!dir.path().join("out/failures.csv").exists());
}

#[test]
fn unknown_preset_exits_nonzero_and_lists_presets() {
    let dir = setup(1);
    let path = dir.path().join("run.toml");
    std::fs::write(&path, common::evaluate_toml("out", &["dix9"])).unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_dixray"))
        .args(["evaluate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dix9"), "{err}");
    for preset in ["dix1", "dix2", "dix3", "dix2_mul", "dix3_grads", "ig", "rollout"] {
        assert!(err.contains(preset), "{err}");
    }
}

#[test]
fn cli_seed_flag_overrides_config() {
    let dir = setup(2);
    let path = dir.path().join("run.toml");
    std::fs::write(&path, common::evaluate_toml("out", &["dix1"])).unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_dixray"))
        .args(["segment", "--seed", "99", "--deterministic", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/segmentation.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",99")), "{text}");
}

#[test]
fn map_files_reject_corruption() {
    let map = dixray::attribution::ExplanationMap::from_grid(
        dixray::attribution::Grid::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap(),
        0,
    );
    let bytes = StoredMap::from_map(&map).encode();
    assert_eq!(StoredMap::decode(&bytes).unwrap().values, vec![0.0, 0.25, 0.5, 1.0]);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(StoredMap::decode(&bad).is_err());
    assert!(StoredMap::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(StoredMap::decode(&long).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(StoredMap::decode(&version).is_err());
}
