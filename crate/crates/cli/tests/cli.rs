use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hpgan_cli::{run, RunManifest};
use hpgan_core::Dataset;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{"epochs": 3, "kernel_size": 3, "n_blocks": 2, "base_channels": 4, "latent_dim": 8, "n_hypotheses": 2, "batch_size": 16}"#;

fn hpgan(args: &[&str]) -> i32 {
    let mut argv = vec!["hpgan"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(normal: usize, abnormal: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        fs::write(f.path("tiny.json"), TINY).unwrap();
        let n = normal.to_string();
        let a = abnormal.to_string();
        let code = hpgan(&["synth", "--normal", &n, "--abnormal", &a, "--seed", "11", "--out", s(&f.path("data.csv"))]);
        assert_eq!(code, 0);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str) {
        let code = hpgan(&[
            "train",
            "--data",
            s(&self.path("data.csv")),
            "--out",
            s(&self.path(out)),
            "--config",
            s(&self.path("tiny.json")),
            "--seed",
            "5",
        ]);
        assert_eq!(code, 0);
    }
}

fn flagged(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample_id,score,theta,is_abnormal"));
    lines
        .filter(|l| l.ends_with(",true"))
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn synth_writes_one_row_per_sample_hour() {
    let f = Fixture::new(200, 60);
    let text = fs::read_to_string(f.path("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 260 * 24);
    let ds = Dataset::load(f.path("data.csv")).unwrap();
    assert_eq!((ds.normals().count(), ds.abnormals().count()), (200, 60));
    let m = RunManifest::load(&f.path("data.csv.manifest.json")).unwrap();
    assert_eq!((m.subcommand.as_str(), m.seed), ("synth", Some(11)));
}

#[test]
fn synth_json_matches_csv() {
    let f = Fixture::new(5, 2);
    assert_eq!(hpgan(&["synth", "--normal", "5", "--abnormal", "2", "--seed", "11", "--out", s(&f.path("d.json"))]), 0);
    let a = Dataset::load(f.path("data.csv")).unwrap();
    let b = Dataset::load(f.path("d.json")).unwrap();
    assert_eq!(a.samples.len(), b.samples.len());
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.label, y.label);
        for (rx, ry) in x.values.iter().zip(&y.values) {
            for (vx, vy) in rx.iter().zip(ry) {
                // CSV stores six decimals.
                assert!((vx - vy).abs() <= 5e-7);
            }
        }
    }
}

#[test]
fn train_writes_model_directory_and_detect_respects_multiplier() {
    let f = Fixture::new(60, 20);
    f.train("model");
    for name in ["model.ckpt", "trace.csv", "threshold.json", "norm.json", "config.json", "manifest.json"] {
        assert!(f.path("model").join(name).is_file(), "missing {name}");
    }
    let trace = fs::read_to_string(f.path("model/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);

    let data = f.path("data.csv");
    let loose = f.path("loose.csv");
    let strict = f.path("strict.csv");
    let model = f.path("model");
    assert_eq!(hpgan(&["detect", "--model", s(&model), "--data", s(&data), "--out", s(&loose), "--multiplier", "1.5"]), 0);
    assert_eq!(hpgan(&["detect", "--model", s(&model), "--data", s(&data), "--out", s(&strict), "--multiplier", "3.0"]), 0);
    let loose = flagged(&loose);
    let strict = flagged(&strict);
    assert!(strict.iter().all(|id| loose.contains(id)));
    assert!(f.path("strict.csv.manifest.json").is_file());
}

#[test]
fn training_normals_are_mostly_accepted() {
    let f = Fixture::new(80, 0);
    f.train("model");
    let out = f.path("v.json");
    assert_eq!(hpgan(&["detect", "--model", s(&f.path("model")), "--data", s(&f.path("data.csv")), "--out", s(&out)]), 0);
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 80);
    let abnormal = rows.iter().filter(|r| r["is_abnormal"] == Value::Bool(true)).count();
    assert!(abnormal * 10 <= rows.len(), "{abnormal} of {} flagged", rows.len());
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let f = Fixture::new(30, 0);
    f.train("a");
    f.train("b");
    for name in ["model.ckpt", "trace.csv", "threshold.json"] {
        let a = fs::read(f.path("a").join(name)).unwrap();
        let b = fs::read(f.path("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    let m = RunManifest::load(&f.path("a/manifest.json")).unwrap();
    assert_eq!(m.seed, Some(5));
    assert_eq!(m.config.unwrap().epochs, 3);
}

fn strip_wall_time(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_time");
            map.values_mut().for_each(strip_wall_time);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

#[test]
fn eval_is_deterministic_for_a_master_seed() {
    let f = Fixture::new(20, 6);
    let config = f.path("tiny.json");
    let eval = |out: &str, seed: &str| {
        let code = hpgan(&[
            "eval", "--data", s(&f.path("data.csv")), "--repeats", "3", "--seed", seed, "--config", s(&config),
            "--epochs", "1", "--out", s(&f.path(out)),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(f.path(out).join("monte_carlo.csv")).unwrap();
        let mut json: Value = serde_json::from_str(&fs::read_to_string(f.path(out).join("monte_carlo.json")).unwrap()).unwrap();
        strip_wall_time(&mut json);
        (csv, json)
    };
    let a = eval("a", "9");
    let b = eval("b", "9");
    assert_eq!(a, b);
    let c = eval("c", "10");
    assert_ne!(a.1["seeds"], c.1["seeds"]);
    assert!(f.path("a/manifest.json").is_file());
}

#[test]
fn exit_codes_classify_failures() {
    let f = Fixture::new(4, 1);
    let bin = env!("CARGO_BIN_EXE_hpgan");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["train", "--data", s(&f.path("data.csv"))]), Some(1));
    assert_eq!(code(&["detect", "--model", s(&f.path("none")), "--data", s(&f.path("data.csv")), "--out", s(&f.path("v.csv"))]), Some(2));

    fs::write(f.path("bad.csv"), "sample_id,hour,pm25,pm10,label\nx,0,1.0,2.0,normal\n").unwrap();
    let out = f.path("m");
    assert_eq!(code(&["train", "--data", s(&f.path("bad.csv")), "--out", s(&out)]), Some(2));

    fs::write(f.path("typo.json"), r#"{"kernal_size": 3}"#).unwrap();
    assert_eq!(code(&["train", "--data", s(&f.path("data.csv")), "--out", s(&out), "--config", s(&f.path("typo.json"))]), Some(1));
    assert_eq!(code(&["train", "--data", s(&f.path("data.csv")), "--out", s(&out), "--kernel-size", "4"]), Some(1));
}

#[test]
fn seed_can_come_from_the_environment() {
    let f = Fixture::new(1, 0);
    let bin = env!("CARGO_BIN_EXE_hpgan");
    let gen = |name: &str, seed: &str| {
        let out = Command::new(bin)
            .args(["synth", "--normal", "3", "--abnormal", "1", "--out", s(&f.path(name))])
            .env("HPGAN_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read(f.path(name)).unwrap()
    };
    assert_eq!(gen("a.csv", "42"), gen("b.csv", "42"));
    assert_ne!(gen("a.csv", "42"), gen("c.csv", "43"));
}
