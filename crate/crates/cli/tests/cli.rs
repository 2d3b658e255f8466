use std::path::Path;
use std::process::{Command, Output};

use fluiddiff::dataset::load_dataset;
use fluiddiff::fdt::{read_tensor, write_tensor};
use fluiddiff::metrics::parse_metrics_csv;
use fluiddiff::train::Checkpoint;
use fluiddiff::Tensor;

fn fluiddiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluiddiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = fluiddiff(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn last_stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path, scenes: &str, total_time: &str) {
    ok(&[
        "gen-data", "--scenes", scenes, "--size", "16", "16", "--total-time", total_time, "--record-every", "1",
        "--seed", "7", "--out", s(dir),
    ]);
}

#[test]
fn gen_data_single_scene_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    small_data(&d, "1", "8");
    let ds = load_dataset(&d).unwrap();
    assert_eq!(ds.manifest.n_scenes, 1);
    assert_eq!(ds.manifest.snapshots_per_scene, 8);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["data"]["scenes"], 1);
    assert_eq!(echo["sim"]["total_time"], 8.0);
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = fluiddiff(&["gen-data", "--scenes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(last_stderr_line(&out).starts_with("error code=2 kind=usage"));
}

#[test]
fn config_file_rejects_unknown_keys_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"data": {"scenes": 2, "sede": 1}}"#).unwrap();
    let out = fluiddiff(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(last_stderr_line(&out).contains("sede"));

    std::fs::write(&cfg, r#"{"data": {"scenes": 5}, "sim": {"height": 16, "width": 16, "total_time": 2}}"#).unwrap();
    let d = tmp.path().join("d");
    ok(&["gen-data", "--config", s(&cfg), "--scenes", "2", "--out", s(&d)]);
    assert_eq!(load_dataset(&d).unwrap().manifest.n_scenes, 2);
}

#[test]
fn invalid_sim_flags_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluiddiff(&["gen-data", "--scenes", "1", "--total-time", "-1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_one_loss_row_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, ck) = (tmp.path().join("d"), tmp.path().join("ck"));
    small_data(&d, "4", "2");
    ok(&["train", "--data", s(&d), "--out", s(&ck), "--preset", "tiny", "--epochs", "2", "--batch-size", "2", "--T", "20"]);
    let ckpt = Checkpoint::<f32>::load(&ck).unwrap();
    // 3 training scenes x 2 snapshots, batch 2, 2 epochs
    assert_eq!(ckpt.meta.total_iterations, 6);
    let csv = std::fs::read_to_string(ck.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(ck.join("run_config.json").exists());
}

#[test]
fn tampered_dataset_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, ck) = (tmp.path().join("d"), tmp.path().join("ck"));
    small_data(&d, "2", "2");
    let scene = d.join("scene_00001.fdt");
    let mut bytes = std::fs::read(&scene).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&scene, bytes).unwrap();
    let out = fluiddiff(&["train", "--data", s(&d), "--out", s(&ck), "--preset", "tiny"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(last_stderr_line(&out).contains("hash mismatch"));
    assert!(!ck.join("params.fdt").exists());
}

#[test]
fn non_finite_loss_exits_five_and_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, ck) = (tmp.path().join("d"), tmp.path().join("ck"));
    small_data(&d, "2", "2");
    let out = fluiddiff(&[
        "train", "--data", s(&d), "--out", s(&ck), "--preset", "tiny", "--lr", "1e30", "--epochs", "5", "--batch-size", "1",
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(last_stderr_line(&out).starts_with("error code=5 kind=non-finite"));
    let ckpt = Checkpoint::<f32>::load(&ck).unwrap();
    assert!(ckpt.meta.iteration < ckpt.meta.total_iterations);
    assert!(ckpt.params.tensors().iter().all(Tensor::is_finite));
}

#[test]
fn sample_shape_determinism_and_tau_range() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    small_data(&p("d"), "2", "3");
    ok(&["train", "--data", s(&p("d")), "--out", s(&p("ck")), "--preset", "tiny", "--epochs", "1", "--T", "10"]);
    let ds = load_dataset(&p("d")).unwrap();
    write_tensor(&p("rho.fdt"), &ds.scenes[0].rho0.to_tensor().cast::<f32>()).unwrap();
    let sample = |out: &str, tau: &str| {
        fluiddiff(&["sample", "--checkpoint", s(&p("ck")), "--rho0", s(&p("rho.fdt")), "--tau", tau, "--seed", "3", "--out", s(&p(out))])
    };
    assert!(sample("a.fdt", "1.5").status.success());
    assert!(sample("b.fdt", "1.5").status.success());
    let a: Tensor<f64> = read_tensor(&p("a.fdt")).unwrap();
    assert_eq!(a.shape(), &[2, 16, 16]);
    assert_eq!(std::fs::read(p("a.fdt")).unwrap(), std::fs::read(p("b.fdt")).unwrap());
    assert!(p("a.fdt.config.json").exists());

    let late = sample("c.fdt", "3.5");
    assert_eq!(late.status.code(), Some(2));
    assert!(last_stderr_line(&late).contains("outside"));
    assert!(!p("c.fdt").exists());
}

#[test]
fn oracle_eval_is_all_zero_with_one_row_per_tau() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, ev) = (tmp.path().join("d"), tmp.path().join("ev"));
    small_data(&d, "5", "4");
    ok(&["eval", "--oracle", "--data", s(&d), "--out", s(&ev)]);
    let rows = parse_metrics_csv(&std::fs::read_to_string(ev.join("metrics.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.2 == 0.0 && r.3 == 0.0));
    let per_tau = rows.iter().filter(|r| r.0.is_some() && r.1 == fluiddiff::metrics::Component::All).count();
    assert_eq!(per_tau, 4);
    for f in ["hist_ux.csv", "hist_uy.csv", "report.json", "run_config.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(r["mse_identity_gap"].as_f64().unwrap() < 1e-6);
    assert_eq!(r["rmse_ratio_to_zero"], 0.0);
}

#[test]
fn eval_without_checkpoint_or_oracle_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fluiddiff(&["eval", "--data", s(tmp.path()), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_csv_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("s.csv");
    ok(&["schedule", "--T", "400", "--beta-start", "0.0001", "--beta-end", "0.02", "--out", s(&f)]);
    let text = std::fs::read_to_string(&f).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 400);
    assert_eq!(rows[0][1], 1e-4);
    assert!((rows[399][1] - 0.02).abs() < 1e-15);
    assert_eq!(rows[0][4], 0.0);
    assert!(rows.windows(2).all(|w| w[1][3] < w[0][3]));

    let bad = fluiddiff(&["schedule", "--T", "10", "--beta-start", "0.5", "--beta-end", "0.1", "--out", s(&f)]);
    assert_eq!(bad.status.code(), Some(2));
}
