use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reviewkd::training::RunRecord;
use reviewkd_cli::runs::RunManifest;

fn reviewkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reviewkd"))
        .current_dir(dir)
        .env_remove("REVIEWKD_DATA_DIR")
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--dataset",
    "synthetic",
    "--subset",
    "30",
    "--test-subset",
    "20",
    "--epochs",
    "2",
    "--batch-size",
    "10",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn train_teacher(dir: &Path, out: &str) {
    let o = reviewkd(dir, &with_tiny(&["train-teacher", "--model", "resnet14", "--out", out]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bad_model_is_a_usage_error_naming_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let o = reviewkd(dir.path(), &with_tiny(&["train-teacher", "--model", "resnet21"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("(depth - 2) % 6 == 0"), "{}", stderr(&o));
}

#[test]
fn missing_data_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = reviewkd(dir.path(), &["train-teacher", "--model", "resnet8", "--dataset", "cifar10"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = reviewkd(dir.path(), &["train-teacher", "--model", "resnet8", "--data-dir", "/nonexistent/cifar"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("train.bin"), "{}", stderr(&o));
    let o = reviewkd(dir.path(), &["train-teacher", "--model", "resnet8", "--precision", "f16"]);
    assert_eq!(code(&o), 2);
    let o = reviewkd(dir.path(), &with_tiny(&["train-teacher", "--model", "resnet8:100"]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_teacher_writes_every_artifact_and_reproduces_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "a");
    train_teacher(dir.path(), "b");
    let a = dir.path().join("a");
    for f in ["manifest.json", "record.csv", "record.json", "checkpoint.bin", "summary.txt"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let header = fs::read_to_string(a.join("record.csv")).unwrap();
    assert!(header.starts_with("epoch,lr,train_loss,ce_loss,mkdr_loss,train_acc,test_acc,wall_time\n"));

    let m = RunManifest::read(&a).unwrap();
    assert_eq!(m.command, "train-teacher");
    assert_eq!(m.seed, 1);
    assert_eq!(m.data.train_size, 30);
    assert_eq!(m.config["model"], "resnet14:10");
    assert_eq!(m.artifacts.checkpoint, Path::new("a").join("checkpoint.bin"));

    let ra = RunRecord::read_json(&a.join("record.json")).unwrap();
    let rb = RunRecord::read_json(&dir.path().join("b/record.json")).unwrap();
    assert_eq!(ra.rows().len(), 2);
    assert!(ra.same_metrics(&rb));
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(dir.path().join("b/checkpoint.bin")).unwrap()
    );
}

#[test]
fn existing_run_needs_resume_and_finished_runs_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "t");
    let before = fs::read(dir.path().join("t/record.json")).unwrap();
    let o = reviewkd(dir.path(), &with_tiny(&["train-teacher", "--model", "resnet14", "--out", "t"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--resume"));
    let o = reviewkd(dir.path(), &with_tiny(&["train-teacher", "--model", "resnet14", "--out", "t", "--resume"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("t/record.json")).unwrap(), before);
    let o = reviewkd(
        dir.path(),
        &with_tiny(&["train-teacher", "--model", "resnet14", "--out", "t", "--resume", "--lr", "0.05"]),
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_one_after_the_manifest_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let o = reviewkd(
        dir.path(),
        &with_tiny(&["train-teacher", "--model", "resnet8", "--out", "x", "--lr", "1e30", "--momentum", "0", "--no-nesterov"]),
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    assert!(dir.path().join("x/manifest.json").is_file());
}

#[test]
fn distill_validates_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = reviewkd(dir.path(), &with_tiny(&["distill", "--teacher", "none.bin", "--student", "resnet8"]));
    assert_eq!(code(&o), 2);
    train_teacher(dir.path(), "t");
    for bad in [
        &["--lambda", "-1"][..],
        &["--hcl-levels", "h,4"],
        &["--hcl-levels", "h,4", "--hcl-weights", "1"],
        &["--mode", "bogus"],
        &["--mid-channels", "0"],
        &["--warmup-epochs", "2", "--no-warmup"],
    ] {
        let mut args = with_tiny(&["distill", "--teacher", "t/checkpoint.bin", "--student", "resnet8"]);
        args.extend_from_slice(bad);
        let o = reviewkd(dir.path(), &args);
        assert_eq!(code(&o), 2, "{bad:?}: {}", stderr(&o));
    }
}

#[test]
fn distill_records_the_resolved_configuration() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "t");
    let o = reviewkd(
        dir.path(),
        &with_tiny(&[
            "distill",
            "--teacher",
            "t/checkpoint.bin",
            "--student",
            "resnet8",
            "--mode",
            "baseline_l2",
            "--lambda",
            "0.6",
            "--hcl-levels",
            "h,4,2,1",
            "--hcl-weights",
            "1,0.5,0.25,0.125",
            "--out",
            "s",
        ]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = RunManifest::read(&dir.path().join("s")).unwrap();
    assert_eq!(m.label, "baseline_l2");
    assert_eq!(m.config["mode"], "baseline_l2");
    assert_eq!(m.config["lambda"], 0.6);
    assert_eq!(m.config["teacher"], "resnet14:10");
    assert_eq!(m.config["student"], "resnet8:10");
    assert_eq!(m.config["mid_channels"], 64);
    let ck = reviewkd::training::load_checkpoint::<f32>(&dir.path().join("s/checkpoint.bin"), None).unwrap();
    assert_eq!(ck.review.unwrap().1.mode, reviewkd::review::AblationMode::BaselineL2);
}

#[test]
fn sweep_with_lambda_zero_reproduces_the_ce_baseline() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "t");
    let o = reviewkd(dir.path(), &with_tiny(&["train-teacher", "--model", "resnet8", "--out", "ce"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = reviewkd(
        dir.path(),
        &with_tiny(&["sweep-lambda", "--teacher", "t/checkpoint.bin", "--student", "resnet8", "--lambdas", "0,0.5", "--seeds", "1", "--out", "sw"]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("lambda,seed,test_acc,best_test_acc"));
    assert_eq!(csv.lines().count(), 3);
    let zero = RunRecord::read_json(&dir.path().join("sw/lambda0-s1/record.json")).unwrap();
    let ce = RunRecord::read_json(&dir.path().join("ce/record.json")).unwrap();
    assert!(zero.same_metrics(&ce));

    let o = reviewkd(
        dir.path(),
        &with_tiny(&["sweep-lambda", "--teacher", "t/checkpoint.bin", "--student", "resnet8", "--lambdas", "", "--out", "sw2"]),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_subset_table_and_failed_sub_runs() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "t");
    // A corrupt manifest makes one sub-run fail; the grid still finishes.
    fs::create_dir_all(dir.path().join("ab/rlf_abf-s2")).unwrap();
    fs::write(dir.path().join("ab/rlf_abf-s2/manifest.json"), "not json").unwrap();
    let o = reviewkd(
        dir.path(),
        &with_tiny(&[
            "ablate",
            "--teacher",
            "t/checkpoint.bin",
            "--student",
            "resnet8",
            "--modes",
            "full,rlf_abf",
            "--seeds",
            "1,2",
            "--out",
            "ab",
            "--resume",
        ]),
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mode,review,rlf,abf,hcl,seed_1,seed_2,mean,std,n");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full,x,x,x,x,"));
    assert!(lines[2].starts_with("rlf_abf,x,x,x,,") && lines[2].contains("failed"));
    assert!(dir.path().join("ab/full-s2/checkpoint.bin").is_file());
    let summary = fs::read_to_string(dir.path().join("ab/summary.txt")).unwrap();
    assert!(summary.contains("failed sub-runs") && summary.contains("rlf_abf-s2"));

    let o = reviewkd(dir.path(), &["report", "ab", "--csv", "rep.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let abf = out.lines().position(|l| l.starts_with("rlf_abf")).unwrap();
    let full = out.lines().position(|l| l.starts_with("full")).unwrap();
    assert!(abf < full, "ladder order: {out}");
    let rep = fs::read_to_string(dir.path().join("rep.csv")).unwrap();
    assert!(rep.starts_with("label,n,final_mean,final_std,best_mean,best_std\n"));
    assert!(rep.contains("full,2,"));
    assert!(rep.contains("rlf_abf,1,"));
}

#[test]
fn report_without_inputs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&reviewkd(dir.path(), &["report"])), 2);
    assert_eq!(code(&reviewkd(dir.path(), &["report", "."])), 2);
    assert_eq!(code(&reviewkd(dir.path(), &["report", "missing"])), 2);
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let o = reviewkd(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("resnet8_full_review") && out.contains("all 32 checks pass"), "{out}");
}
