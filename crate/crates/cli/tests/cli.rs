use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssc")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The last stderr line, which carries the error for failing runs.
fn error_line(o: &Output) -> String {
    stderr(o).lines().last().unwrap_or("").to_string()
}

const TINY: [&str; 14] = [
    "--set",
    "model.widths_2d=[4, 4, 4, 4]",
    "--set",
    "model.widths_3d=[4, 4, 4, 4]",
    "--set",
    "model.feature_dim=4",
    "--set",
    "model.fusion_dim=2",
    "--set",
    "data.train_scenes=1",
    "--set",
    "data.val_scenes=1",
    "--set",
    "train.epochs=1",
];

#[test]
fn usage_errors_are_one_line() {
    let o = ssc(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]: "), "{err}");
}

#[test]
fn config_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = ssc(&["synth", "--out", out.to_str().unwrap(), "--ablation", "3d-only"]);
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("error[config]: unknown ablation preset `3d-only`"), "{}", stderr(&o));

    let o = ssc(&["synth", "--out", out.to_str().unwrap(), "--set", "train.epoch=3"]);
    assert!(error_line(&o).starts_with("error[config]:"), "{}", stderr(&o));

    let o = ssc(&["synth", "--out", out.to_str().unwrap(), "--set", "model.class_count=0"]);
    assert!(error_line(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn resolved_config_goes_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = ssc(&["synth", "--out", out.to_str().unwrap(), "--count", "0", "--set", "train.epochs=17"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("# epochs = 17"));
}

fn synth(dir: &Path, seed: u64, count: usize) {
    let o = ssc(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_then_eval_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 3, 2);
    for f in ["velodyne/000004.bin", "voxels/000004.label", "voxels/000004.invalid", "labels/000004.label"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let voxels = dir.path().join("voxels");
    let report = dir.path().join("eval.jsonl");
    let o = ssc(&[
        "eval",
        "--pred",
        voxels.to_str().unwrap(),
        "--truth",
        voxels.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["scene"], "000003");
    assert_eq!(lines[2]["scene"], "aggregate");
    assert_eq!(lines[2]["iou"], 1.0);
    assert!(stdout(&o).contains("miou            1.0000"), "{}", stdout(&o));
}

#[test]
fn eval_reports_unpaired_and_disjoint_stems() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 0, 2);
    synth(b.path(), 1, 1);
    let (pa, pb) = (a.path().join("voxels"), b.path().join("voxels"));
    let o = ssc(&["eval", "--pred", pa.to_str().unwrap(), "--truth", pb.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o), "error[eval]: unpaired stems: 000000");

    let c = tempfile::tempdir().unwrap();
    synth(c.path(), 5, 1);
    let pc = c.path().join("voxels");
    let o = ssc(&["eval", "--pred", pb.to_str().unwrap(), "--truth", pc.to_str().unwrap()]);
    assert_eq!(error_line(&o), "error[eval]: no prediction/truth stems in common");
}

#[test]
fn export_writes_one_line_per_occupied_voxel() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 1);
    let grid = dir.path().join("voxels").join("000002.label");
    let out = dir.path().join("points.txt");
    let o = ssc(&["export", "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let occupied: usize = stdout(&ssc(&["synth", "--out", dir.path().join("again").to_str().unwrap(), "--seed", "2"]))
        .split_whitespace()
        .last()
        .unwrap()
        .parse()
        .unwrap();
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), occupied);
    let first: Vec<&str> = text.lines().next().unwrap().split(' ').collect();
    assert_eq!(first.len(), 7);

    let missing = dir.path().join("nope.label");
    let o = ssc(&["export", "--grid", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(error_line(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

#[test]
fn bench_reports_the_two_thirds_ratio() {
    let o = ssc(&[
        "bench",
        "--set",
        "bench.channels=4",
        "--set",
        "bench.lattice=[8, 8, 4]",
        "--set",
        "bench.repeats=1",
        "--set",
        "bench.sweep=[10, 20, 40]",
        "--set",
        "bench.conv2d_size=[2, 8, 8]",
        "--set",
        "bench.points=100",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["param_ratio_num"].as_u64().unwrap() * 3, v["param_ratio_den"].as_u64().unwrap() * 2);
    assert_eq!(v["asymmetric"]["kernel_params"], 36 * 16);
}

#[test]
fn train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", run.to_str().unwrap()];
    args.extend(TINY);
    let o = ssc(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["log.jsonl", "final.ckpt", "best.ckpt", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("sha256"));

    let ckpt = run.join("final.ckpt");
    let pred = dir.path().join("pred.label");
    let o = ssc(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--runs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::metadata(&pred).unwrap().len(), 2 * 64 * 64 * 8);
    let timing: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(timing["runs"], 2);
    assert_eq!(timing["warmup"], 3);
    assert!(timing["median_seconds"].as_f64().unwrap() > 0.0);

    let scans = dir.path().join("scans");
    synth(&scans, 9, 1);
    let scan = scans.join("velodyne").join("000009.bin");
    let o = ssc(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scan",
        scan.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--runs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let kitti = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/semantickitti.toml");
    let o = ssc(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        kitti,
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("error[config]: checkpoint grid"), "{}", stderr(&o));

    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = ssc(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert!(error_line(&o).starts_with("error[checkpoint]:"), "{}", stderr(&o));
}
