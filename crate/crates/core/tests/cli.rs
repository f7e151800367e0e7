use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stemob(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stemob"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stemob(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&stemob(&["invert", "--manifest"], dir.path())), 1);
    assert_eq!(code(&stemob(&["schedule", "dump", "--schedule", "sigmoid"], dir.path())), 1);
    assert_eq!(code(&stemob(&["--help"], dir.path())), 0);
    assert_eq!(code(&stemob(&["--version"], dir.path())), 0);
}

#[test]
fn schedule_dump_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = stemob(&["schedule", "dump", "--schedule", "linear", "--total", "4"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,beta,alpha,alpha_bar,sigma");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,1.0000000000000000e-4,"));
}

#[test]
fn category_analysis_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&stemob(&["harness", "categories", "--out", "cats"], p)), 0);
    let o = stemob(
        &["analyze", "distances", "--manifest", "cats/manifest.jsonl", "--out", "matrix.csv"],
        p,
    );
    assert_eq!(code(&o), 0);
    let matrix = fs::read_to_string(p.join("matrix.csv")).unwrap();
    assert!(matrix.starts_with("category,cross,disk,ring,square,triangle\n"));
    assert_eq!(matrix.lines().count(), 6);
    let o = stemob(
        &["analyze", "curve", "--manifest", "cats/manifest.jsonl", "--rho", "0.4", "--out", "curve.csv"],
        p,
    );
    assert_eq!(code(&o), 0);
    let curve = fs::read_to_string(p.join("curve.csv")).unwrap();
    assert!(curve.starts_with("t,intra_fraction,cross_fraction\n"));
    assert_eq!(curve.lines().count(), 51);
    let o = stemob(
        &["attr-loss", "--x", "cats/disk-00.png", "--y", "cats/disk-01.png", "--rho", "0.4"],
        p,
    );
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("t,loss\n"));
    assert!(text.lines().last().unwrap().starts_with("tau,"));
    assert_eq!(code(&stemob(&["analyze", "curve", "--manifest", "cats/manifest.jsonl", "--rho", "0.7"], p)), 1);
}

#[test]
fn invert_workers_agree_and_partial_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("gen.json"), r#"{"n_train": 6, "n_test": 4, "size": 16}"#).unwrap();
    assert_eq!(code(&stemob(&["harness", "dataset", "--config", "gen.json", "--out", "data"], p)), 0);
    for (workers, out) in [("1", "w1"), ("8", "w8")] {
        let o = stemob(
            &[
                "invert", "--manifest", "data/manifest.jsonl", "--steps", "15", "--total", "50",
                "--method", "ddpm", "--schedule", "cosine", "--seed", "3", "--workers", workers,
                "--format", "tensor", "--out", out,
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for e in fs::read_dir(p.join("w1")).unwrap() {
        let name = e.unwrap().file_name();
        if name.to_string_lossy().ends_with(".stem") {
            assert_eq!(fs::read(p.join("w1").join(&name)).unwrap(), fs::read(p.join("w8").join(&name)).unwrap());
        }
    }

    let mut manifest = fs::read_to_string(p.join("data/manifest.jsonl")).unwrap();
    manifest.push_str("{\"id\":\"ghost\",\"path\":\"ghost.png\",\"split\":\"test\"}\n");
    fs::write(p.join("data/broken.jsonl"), manifest).unwrap();
    let o = stemob(&["invert", "--manifest", "data/broken.jsonl", "--out", "partial"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ghost"));
    assert!(p.join("partial/manifest.partial.jsonl").exists());
    assert!(!p.join("partial/manifest.jsonl").exists());

    let o = stemob(&["sweep", "--manifest", "data/manifest.jsonl", "--pairs", "0/50,9/30", "--out", "sw"], p);
    assert_eq!(code(&o), 0);
    assert!(p.join("sw/t0_T50/manifest.jsonl").exists());
    assert!(p.join("sw/t9_T30/manifest.jsonl").exists());
    assert_eq!(code(&stemob(&["sweep", "--manifest", "data/manifest.jsonl", "--pairs", "60/50", "--out", "bad"], p)), 1);

    let o = stemob(&["grid", "--image", "data/train-00000.png", "--steps", "5,10,15", "--out", "grid.png"], p);
    assert_eq!(code(&o), 0);
    let grid = stemob::codec::load_image_as_latent(p.join("grid.png")).unwrap();
    assert_eq!(grid.shape(), &[3, 16, 64]);
}

#[test]
fn harness_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("exp.json"),
        r#"{"seeds": [0, 1], "arms": [[0, 50], [5, 50]], "size": 16, "n_train": 30, "n_eval": 10, "n_test": 10}"#,
    )
    .unwrap();
    let o = stemob(&["harness", "run", "--config", "exp.json", "--out", "exp"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(p.join("exp/report.csv")).unwrap();
    assert!(report.starts_with("condition,t_stop,T,seed,split,mse,success_rate\n"));
    assert_eq!(report.lines().count(), 1 + 2 * 3 * 2);
    assert!(p.join("exp/summary.csv").exists());
    fs::write(p.join("bad.json"), r#"{"seeds": [0]}"#).unwrap();
    assert_eq!(code(&stemob(&["harness", "run", "--config", "bad.json", "--out", "x"], p)), 1);
}
