use std::path::Path;
use std::process::{Command, Output};

use cellpoint::render::{palette, Canvas};
use serde_json::Value;

fn cellpoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellpoint")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cellpoint(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn failure(args: &[&str]) -> Value {
    let out = cellpoint(args);
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("error JSON on stderr")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_splits_four_to_one_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let m = ok(&["generate", "--set", "num_images=100", "--out", s(&a)]);
    assert_eq!(m["train"].as_array().unwrap().len(), 80);
    assert_eq!(m["test"].as_array().unwrap().len(), 20);
    ok(&["generate", "--set", "num_images=100", "--out", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let m = ok(&["generate", "--set", "num_images=0", "--out", s(dir.path())]);
    assert!(m["train"].as_array().unwrap().is_empty());
}

#[test]
fn bad_config_values_name_their_field() {
    let dir = tempfile::tempdir().unwrap();
    let e = failure(&["generate", "--set", "generator.bogus=1", "--out", s(dir.path())]);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("bogus"));
    let e = failure(&["sweep-q", "--q", "0.4,1.5", "--out", s(dir.path())]);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("q"));
}

fn train_tiny(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    ok(&["generate", "--set", "num_images=5", "--out", s(&data)]);
    let run = dir.join("run");
    let common = [
        "--set".to_string(),
        format!("dataset={}", s(&data)),
        "--set".into(),
        format!("output_dir={}", s(&run)),
        "--set".into(),
        "epochs=1".into(),
        "--set".into(),
        "backbone.stage_channels=[4,8,8,8]".into(),
        "--set".into(),
        "backbone.pfa_channels=8".into(),
    ];
    let mut args = vec!["train"];
    args.extend(common.iter().map(String::as_str));
    let summary = ok(&args);
    assert_eq!(summary["epochs"], 1);
    assert_eq!(summary["pfa_enabled"], true);
    (s(&data).to_string(), s(&run).to_string())
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = train_tiny(dir.path());
    let a = ok(&["eval", "--run", &run, "--no-timing"]);
    let b = ok(&["eval", "--run", &run, "--no-timing"]);
    assert_eq!(a, b);
    assert!(a.get("seconds_per_image").is_none());
    let timed = ok(&["eval", "--run", &run, "--split", "train"]);
    assert!(timed["seconds_per_image"].as_f64().unwrap() > 0.0);

    let e = failure(&["eval", "--run", &run, "--radius", "0"]);
    assert_eq!(e["error"], "config");

    let image = std::fs::read_dir(Path::new(&data).join("images")).unwrap().next().unwrap().unwrap().path();
    let preds = ok(&["infer", "--run", &run, "--image", s(&image), "--threshold", "0"]);
    assert!(preds.as_array().is_some());
}

#[test]
fn missing_run_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = failure(&["eval", "--run", s(&dir.path().join("nope"))]);
    assert_eq!(e["error"], "io");
}

#[test]
fn render_follows_the_palette_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let base = Canvas::filled(40, 12, [0, 0, 0]);
    let image = dir.path().join("base.png");
    base.write_png(&image).unwrap();
    let points = dir.path().join("points.json");
    let preds: Vec<Value> = (0..4)
        .map(|c| serde_json::json!({"x": 5.0 + 9.0 * c as f64, "y": 6.0, "score": 0.9, "class_id": c}))
        .collect();
    std::fs::write(&points, serde_json::to_string(&preds).unwrap()).unwrap();
    let out_a = dir.path().join("a.png");
    let out_b = dir.path().join("b.png");
    for out in [&out_a, &out_b] {
        let status = cellpoint(&["render", "--image", s(&image), "--points", s(&points), "--out", s(out)]);
        assert!(status.status.success());
    }
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
    let drawn = Canvas::read_png(&out_a).unwrap();
    for c in 0..4 {
        let i = (6 * 40 + 5 + 9 * c) * 3;
        assert_eq!(drawn.pixels[i..i + 3], palette(4)[c]);
    }

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let out = dir.path().join("same.png");
    assert!(cellpoint(&["render", "--image", s(&image), "--points", s(&empty), "--out", s(&out)]).status.success());
    assert_eq!(Canvas::read_png(&out).unwrap(), base);
}

#[test]
fn single_value_sweeps_give_single_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (data, point_run) = train_tiny(dir.path());
    let tiny = |out: &Path| {
        vec![
            "--set".to_string(),
            format!("dataset={data}"),
            "--set".into(),
            format!("output_dir={}", s(out)),
            "--set".into(),
            "epochs=1".into(),
            "--set".into(),
            "backbone.stage_channels=[4,8,8,8]".into(),
            "--set".into(),
            "backbone.pfa_channels=8".into(),
        ]
    };

    let sweep = dir.path().join("sweep");
    let mut args = vec!["sweep-q".to_string(), "--q".into(), "0.4".into(), "--out".into(), s(&sweep).into()];
    args.extend(tiny(&sweep.join("unused")));
    let rows = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(rows.as_array().unwrap().len(), 1);
    let csv = std::fs::read_to_string(sweep.join("sweep_q.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap(), "q,detection_f1,classification_f1");
    assert!(sweep.join("sweep_q.png").is_file());

    let density = dir.path().join("density");
    let mut args = vec!["baseline-train".to_string()];
    args.extend(tiny(&density));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let out = dir.path().join("baseline");
    let rows = ok(&[
        "baseline-sweep",
        "--run",
        s(&density),
        "--min-distance",
        "6",
        "--point-run",
        &point_run,
        "--out",
        s(&out),
    ]);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["min_distance"], 6);
    assert!(rows[1]["min_distance"].is_null());
    let csv = std::fs::read_to_string(out.join("baseline_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("point,,"), "{}", lines[2]);
}
