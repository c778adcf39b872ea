use std::path::Path;
use std::process::{Command, Output};

fn knlio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knlio"))
        .args(args)
        .env("KNLIO_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = knlio(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["default-config"]);
    let file = dir.path().join("c.toml");
    std::fs::write(&file, &text).unwrap();
    assert_eq!(ok(&["--config", path(&file), "default-config"]), text);
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "[pipeline]\nmodee = \"semi\"\n").unwrap();
    let out = knlio(&["--config", path(&file), "default-config"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("c.toml"), "{err}");

    let out = knlio(&["simulate", "--scenario", "nowhere", "--out", path(dir.path())]);
    assert!(!out.status.success());
    let out = knlio(&["eval", "--trajectory", "a.tum"]);
    assert!(!out.status.success());
}

#[test]
fn simulate_run_mesh_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("short.toml");
    std::fs::write(&scenario, "name = \"short\"\nmotion = \"static\"\nduration = 3.0\n").unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["simulate", "--scenario", path(&scenario), "--out", path(&data)]);
    ok(&["run", "--dataset", path(&data), "--out", path(&run), "--mode", "semi"]);
    let mesh = run.join("mesh.ply");
    ok(&["mesh", "--map", path(&run), "--out", path(&mesh), "--mesh-voxel", "0.1"]);

    let traj: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--trajectory",
        path(&run.join("trajectory.tum")),
        "--truth",
        path(&data.join("groundtruth.tum")),
    ]))
    .unwrap();
    assert!(traj["ate_rmse_m"].as_f64().unwrap() < 0.05);
    assert_eq!(traj["associated_poses"].as_u64().unwrap(), 20);

    let metrics: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--mesh",
        path(&mesh),
        "--reference",
        path(&data.join("reference.ply")),
    ]))
    .unwrap();
    let f = metrics["f_score"].as_f64().unwrap();
    assert!(f > 0.0 && f <= 100.0);
}
