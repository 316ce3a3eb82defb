use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaze_core::data::{load_annotations, load_raster, make_sample, InputShape};
use gaze_core::grid_csv::read_grid;
use gaze_core::params::Checkpoint;
use serde_json::Value;
use tempfile::TempDir;

fn gaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaze"))
        .args(args)
        .env_remove("GAZE_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn echoed(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("config.json")).unwrap()).unwrap()
}

fn gen_data(dir: &Path, train: usize, test: usize) -> Output {
    gaze(&[
        "gen-data",
        "--out",
        p(dir),
        "--seed",
        "4",
        "--set",
        &format!("data.train_samples={train}"),
        "--set",
        &format!("data.test_samples={test}"),
    ])
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn empty_dataset_is_valid() {
    let tmp = TempDir::new().unwrap();
    let out = gen_data(tmp.path(), 0, 0);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(load_annotations(&tmp.path().join("annotations.jsonl")).unwrap().is_empty());
}

#[test]
fn generated_datasets_are_byte_identical_and_loadable() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen_data(&a, 6, 3)), 0);
    assert_eq!(code(&gen_data(&b, 6, 3)), 0);
    let (fa, mut fb) = (files(&a), files(&b));
    // the echoed config names its own output directory
    let echo = PathBuf::from("config.json");
    fb.insert(echo.clone(), fa[&echo].clone());
    assert_eq!(fa, fb);
    assert_eq!(fa.len(), 9 + 2);

    let records = load_annotations(&a.join("annotations.jsonl")).unwrap();
    assert_eq!(records.len(), 9);
    let shape = InputShape { scene: 32, crop: 8 };
    for r in &records {
        let image = load_raster(&a.join(&r.image)).unwrap();
        assert!(make_sample(r, &image, shape).unwrap().is_some());
    }
}

#[test]
fn precedence_is_cli_over_file_over_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "train": {"lr": 0.1, "sigma": 2.0}, "field": {"size": 5}}"#).unwrap();
    let out_dir = tmp.path().join("f");
    let out = gaze(&["field", "--config", p(&cfg), "--set", "train.lr=0.2", "--seed", "3", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let e = echoed(&out_dir);
    assert_eq!(e["train"]["lr"], 0.2);
    assert_eq!(e["train"]["sigma"], 2.0);
    assert_eq!(e["train"]["batch_size"], 32);
    assert_eq!(e["field"]["size"], 5);
    assert_eq!(e["seed"], 3);
    assert_eq!(e["train"]["seed"], 3);
    assert_eq!(e["data"]["scene"]["seed"], 3);
    assert_eq!(e["out"], p(&out_dir));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gaze"))
        .args(["field"])
        .env("GAZE_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("field").join("config.json").is_file());
    assert!(tmp.path().join("field").join("field_gamma5.csv").is_file());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let out = gaze(&["field", "--out", p(&first), "--set", "field.direction=[0.3,-1]", "--set", "field.gammas=[3]"]);
    assert_eq!(code(&out), 0);
    let again = tmp.path().join("again");
    let out = gaze(&["field", "--config", p(&first.join("config.json")), "--out", p(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(first.join("field_gamma3.csv")).unwrap(),
        std::fs::read(again.join("field_gamma3.csv")).unwrap()
    );
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let o = p(tmp.path());
    for args in [
        vec!["train", "--out", o, "--set", "train.lrr=1"],
        vec!["train", "--out", o, "--set", "novalue"],
        vec!["train", "--out", o, "--set", "train.heatmap_resolution=12"],
        vec!["train", "--out", o, "--config", "/nonexistent/cfg.json"],
        vec!["field", "--out", o, "--set", "field.direction=[0,0]"],
        vec!["field", "--out", o, "--set", "field.gammas=[0.5]"],
        vec!["eval", "--out", o],
        vec!["gen-data", "--out", o, "--set", "data.scene.objects=0"],
    ] {
        let out = gaze(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error: "));
    }
}

#[test]
fn data_errors_exit_with_code_three() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.json");
    let out = gaze(&["eval", "--out", p(&tmp.path().join("e")), "--set", &format!("eval.checkpoint={}", p(&missing))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("checkpoint not found"), "{}", stderr(&out));

    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(data.join("annotations.jsonl"), "{\"schema\":\"gaze-annotations\",\"version\":1}\n{not json\n").unwrap();
    let out = gaze(&["train", "--out", p(&tmp.path().join("t")), "--set", &format!("data.dir={}", p(&data))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains(":2:"), "{}", stderr(&out));

    let out = gaze(&["train", "--out", p(&tmp.path().join("t2")), "--set", &format!("data.dir={}", p(&tmp.path().join("nope")))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn diverging_training_exits_with_code_four_and_context() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("t");
    let out = gaze(&["train", "--out", p(&out_dir), "--set", "train.lr=1e300", "--set", "data.train_samples=40"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("stage 1 epoch"), "{}", stderr(&out));
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("stage,epoch,loss_d,loss_h,loss,seconds\n"));
}

#[test]
fn training_writes_a_log_and_a_loadable_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("t");
    let out = gaze(&[
        "train",
        "--out",
        p(&out_dir),
        "--set",
        "data.train_samples=48",
        "--set",
        "train.stage1_epochs=2",
        "--set",
        "train.stage2_epochs=1",
        "--set",
        "train.finetune_epochs=1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    let stages: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, ["1", "1", "2", "3"]);
    let ckpt = Checkpoint::load(&out_dir.join("checkpoint.json")).unwrap();
    assert!(gaze_core::model::GazeNet::from_checkpoint(&ckpt).is_ok());
    assert!(!std::fs::read_dir(&out_dir).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with(".tmp")));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

#[test]
fn oracle_evaluation_is_perfect_and_aggregates_match_the_rows() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen_data(&data, 0, 40)), 0);
    let out_dir = tmp.path().join("e");
    let out = gaze(&["eval", "--out", p(&out_dir), "--set", "eval.predictor=oracle", "--set", &format!("data.dir={}", p(&data))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let metrics: Value = serde_json::from_slice(&std::fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    let agg = &metrics["aggregate"];
    assert_eq!(agg["samples"], 40);
    assert_eq!(agg["auc"], 1.0);

    let (header, rows) = read_csv(&out_dir.join("per_sample.csv"));
    assert_eq!(rows.len(), 40);
    let half_cell_diagonal = 2f64.sqrt() / (2.0 * 16.0);
    for (col, key) in header.iter().enumerate().skip(4) {
        let vals: Vec<f64> = rows.iter().filter(|r| !r[col].is_empty()).map(|r| r[col].parse().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - agg[key.as_str()].as_f64().unwrap()).abs() < 1e-12, "{key}");
        if key == "dist" {
            assert!(vals.iter().all(|d| *d <= half_cell_diagonal + 1e-12));
        }
    }

    let (header, curve) = read_csv(&out_dir.join("curve.csv"));
    assert_eq!(header, ["threshold", "fraction"]);
    let last: Vec<f64> = curve.last().unwrap().iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(last, [0.5, 1.0]);
}

#[test]
fn center_baseline_is_scored() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("e");
    let out = gaze(&["eval", "--out", p(&out_dir), "--set", "eval.predictor=center", "--set", "data.test_samples=50"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics: Value = serde_json::from_slice(&std::fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["predictor"], "center");
    let dist = metrics["aggregate"]["dist"].as_f64().unwrap();
    assert!(dist > 0.1 && dist < 0.6, "{dist}");
}

fn polar(head: (f64, f64), p: (f64, f64), dir: (f64, f64)) -> f64 {
    let (gx, gy) = (p.0 - head.0, p.1 - head.1);
    if gx == 0.0 && gy == 0.0 {
        return 0.0;
    }
    (gy.atan2(gx) - dir.1.atan2(dir.0)).cos().max(0.0)
}

fn field_dump(dir: &Path, gamma: &str) -> gaze_core::grid_csv::Grid {
    let f = std::fs::File::open(dir.join(format!("field_gamma{gamma}.csv"))).unwrap();
    read_grid(std::io::BufReader::new(f), "dump").unwrap()
}

#[test]
fn field_dumps_follow_the_formula() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("f");
    let out = gaze(&["field", "--out", p(&out_dir), "--set", "field.size=15", "--set", "field.gammas=[1,2,5]"]);
    assert_eq!(code(&out), 0);
    let g1 = field_dump(&out_dir, "1");
    let g2 = field_dump(&out_dir, "2");
    let g5 = field_dump(&out_dir, "5");
    assert_eq!(g1.comments, ["head=0.5,0.5", "direction=1,0", "gamma=1"]);
    assert_eq!((g1.width, g1.height), (15, 15));

    let row = &g1.values[7 * 15..8 * 15];
    assert!(row[..7].iter().all(|v| *v == 0.0), "{row:?}");
    assert_eq!(row[7], 0.0);
    assert!(row[8..].iter().all(|v| (v - 1.0).abs() < 1e-12), "{row:?}");

    for (a, b) in g1.values.iter().zip(&g2.values) {
        assert!((a * a - b).abs() < 1e-12);
    }
    for r in 0..15 {
        for c in 0..15 {
            let cell = ((c as f64 + 0.5) / 15.0, (r as f64 + 0.5) / 15.0);
            let want = polar((0.5, 0.5), cell, (1.0, 0.0));
            assert!((g1.values[r * 15 + c] - want).abs() < 1e-9);
            assert!((g5.values[r * 15 + c] - want.powi(5)).abs() < 1e-9);
        }
    }
}

#[test]
fn gradcheck_reports_every_kind_once_and_catches_corruption() {
    let tmp = TempDir::new().unwrap();
    let out = gaze(&["gradcheck", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = stdout.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for kind in gaze_core::autodiff::Op::DIFFERENTIABLE {
        assert!(names.contains(kind), "{kind} missing");
    }
    for extra in ["gaze_field", "direction_pathway", "end_to_end"] {
        assert!(names.contains(&extra));
    }
    assert!(stdout.lines().all(|l| l.ends_with("PASS")));

    let out = gaze(&["gradcheck", "--out", p(tmp.path()), "--set", "gradcheck.corrupt=conv2d"]);
    assert_eq!(code(&out), 4);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let failing: Vec<&str> = stdout.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("conv2d "));
}
