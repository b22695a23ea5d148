//! End-to-end tests of the installed binary: command wiring, file outputs
//! and the documented exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panoptic4d"))
}

fn write_tiny_scene(path: &Path) {
    let spec = "\
scans=4
seed=5
ground_extent=10
ground_points_per_scan=80
object=class=2 size=2,1,1 vel=0.4,0,0 points=40 center=-4,-3,0.5
object=class=3 size=0.8,0.8,1.6 points=30 center=4,3,0.8
";
    std::fs::write(path, spec).unwrap();
}

#[test]
fn synth_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pred = dir.path().join("pred");

    let out = bin()
        .args(["synth-gen", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("velodyne/000000.bin").exists());
    assert!(data.join("labels/000019.label").exists());
    assert!(data.join("poses.txt").exists());

    let out = bin()
        .args(["infer", "--oracle", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&pred)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pred.join("000000.label").exists());
    assert!(pred.join("instance_map.txt").exists());

    let out = bin()
        .args(["eval", "--gt"])
        .arg(&data)
        .arg("--pred")
        .arg(&pred)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("LSTQ 1.0000"), "stdout: {stdout}");
    assert!(pred.join("eval_report.csv").exists());
    assert!(pred.join("eval_report.txt").exists());
}

#[test]
fn identical_seeds_give_identical_prediction_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("scene.txt");
    write_tiny_scene(&spec);
    assert!(bin()
        .args(["synth-gen", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    for run in ["a", "b"] {
        assert!(bin()
            .args(["infer", "--oracle", "--vote_noise", "0.1", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join(run))
            .status()
            .unwrap()
            .success());
    }
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let pa = entry.unwrap().path();
        let pb = dir.path().join("b").join(pa.file_name().unwrap());
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }
}

#[test]
fn train_writes_checkpoint_and_loss_curve_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("scene.txt");
    write_tiny_scene(&spec);
    assert!(bin()
        .args(["synth-gen", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());

    let ckpt = dir.path().join("model.ckpt");
    let losses = dir.path().join("losses.csv");
    let out = bin()
        .args([
            "train",
            "--feature_f",
            "8",
            "--feature_d",
            "6",
            "--num_proposals",
            "8",
            "--phase1_iters",
            "6",
            "--phase2_iters",
            "3",
            "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .arg("--loss-csv")
        .arg(&losses)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("phase 1: iterations 0..6"));
    assert!(stdout.contains("phase 2: iterations 6..9"));
    assert!(ckpt.exists());
    let curve = std::fs::read_to_string(&losses).unwrap();
    assert!(curve.starts_with("iteration,l_sem,l_vot,l_agg,l_obj"));
    assert_eq!(curve.trim().lines().count(), 1 + 9);

    // Resume from the finished checkpoint: a no-op that still succeeds.
    let resumed = dir.path().join("resumed.ckpt");
    assert!(bin()
        .args([
            "train",
            "--feature_f",
            "8",
            "--feature_d",
            "6",
            "--num_proposals",
            "8",
            "--phase1_iters",
            "6",
            "--phase2_iters",
            "3",
            "--data",
        ])
        .arg(&data)
        .arg("--resume")
        .arg(&ckpt)
        .arg("--out")
        .arg(&resumed)
        .status()
        .unwrap()
        .success());
    assert!(resumed.exists());

    // The checkpoint drives inference.
    let pred = dir.path().join("pred");
    assert!(bin()
        .args([
            "infer",
            "--feature_f",
            "8",
            "--feature_d",
            "6",
            "--num_proposals",
            "8",
            "--data",
        ])
        .arg(&data)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&pred)
        .status()
        .unwrap()
        .success());
    assert!(pred.join("000000.label").exists());
}

#[test]
fn config_file_loads_and_flags_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("scene.txt");
    write_tiny_scene(&spec);
    assert!(bin()
        .args(["synth-gen", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "phase1_iters=7\nphase2_iters=2\nfeature_f=8\nfeature_d=6\nnum_proposals=8\n",
    )
    .unwrap();

    // File value alone.
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("a.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("phase 1: iterations 0..7"));

    // A flag of the same name overrides the file.
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--phase1_iters", "4", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("b.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("phase 1: iterations 0..4"));
}

#[test]
fn window_size_and_aggregate_flags_are_wired() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("scene.txt");
    write_tiny_scene(&spec);
    assert!(bin()
        .args(["synth-gen", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    for (label, extra) in [
        ("t4", vec!["--scans", "4"]),
        ("centers", vec!["--aggregate", "centers"]),
        ("nms", vec!["--aggregate", "nms"]),
        ("gauss", vec!["--variant", "gaussian", "--objectness_sigma", "1.0"]),
    ] {
        let out = bin()
            .args(["infer", "--oracle", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join(label))
            .args(&extra)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{label}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(dir.path().join(label).join("000000.label").exists());
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["infer", "--oracle", "--temporal_window", "0", "--data"])
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("p"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Overlapping scene spec is a config-class failure too.
    let spec = dir.path().join("bad.txt");
    std::fs::write(
        &spec,
        "object=class=2 size=2,2,2 center=0,0,1\nobject=class=2 size=2,2,2 center=0.5,0,1\n",
    )
    .unwrap();
    let out = bin()
        .args(["synth-gen", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
}

#[test]
fn data_format_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(data.join("velodyne")).unwrap();
    std::fs::write(data.join("velodyne/000000.bin"), vec![0u8; 20]).unwrap();
    std::fs::write(data.join("poses.txt"), "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    let out = bin()
        .args(["infer", "--oracle", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("p"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset 16"));
}

#[test]
fn ablate_writes_score_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("scene.txt");
    write_tiny_scene(&spec);
    assert!(bin()
        .args(["synth-gen", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let csv_path = dir.path().join("sweep.csv");
    let out = bin()
        .args(["ablate", "--oracle", "--axis", "sampling", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.contains("sampling=fps"));
    assert!(csv.contains("sampling=random"));
}
