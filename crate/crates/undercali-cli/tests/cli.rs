use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_undercali"))
        .args(args)
        .env_remove("UNDERCALI_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn write_config(path: &Path, out_dir: &Path) -> PathBuf {
    let text = format!(
        "[data]\n\
         source = scenario\n\n\
         [grid]\n\
         l_in = 6\n\
         l_out = 2\n\
         n_vars = 2\n\
         window_start = 0\n\
         window_end = 8\n\n\
         [scenario]\n\
         n_samples = 120\n\
         seed = 5\n\
         regime.0 = start=0 offset=0 ar=0.5 noise=1 missing=0.2\n\
         regime.1 = start=0.6 offset=1.5 ar=0.5 noise=1 missing=0.5\n\n\
         [split]\n\
         train = 0.25\n\
         valid = 0.1\n\n\
         [forecaster]\n\
         max_epochs = 40\n\n\
         [ue]\n\
         max_epochs = 25\n\n\
         [engine]\n\
         mode = full\n\
         batch_size = 16\n\n\
         [run]\n\
         out = {}\n\
         seeds = 1,2\n",
        out_dir.display()
    );
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(&tmp.path().join("run.cfg"), &out);
    let cfg = cfg.to_str().unwrap();

    assert_ok(&run(&["gen-data", "--config", cfg]));
    let stream = fs::read_to_string(out.join("stream.jsonl")).unwrap();
    assert_eq!(stream.lines().count(), 120);

    // Regenerating is byte-identical.
    let out2 = tmp.path().join("again");
    assert_ok(&run(&["gen-data", "--config", cfg, "--out", out2.to_str().unwrap()]));
    assert_eq!(stream, fs::read_to_string(out2.join("stream.jsonl")).unwrap());

    assert_ok(&run(&["pretrain", "--kind", "forecaster", "--config", cfg]));
    assert!(out.join("forecaster.ckpt").exists());
    assert_ok(&run(&["pretrain", "--kind", "ue", "--config", cfg]));
    assert!(out.join("ue.ckpt").exists());

    let online = run(&["run-online", "--config", cfg]);
    assert_ok(&online);
    assert!(stdout(&online).contains("full: mse"));
    // 120 samples, 25% train + 10% valid, batches of 16: 78 online samples
    // in 5 batches, once per seed.
    for seed in [1, 2] {
        let csv = fs::read_to_string(out.join(format!("batches_full_seed{seed}.csv"))).unwrap();
        assert!(csv.starts_with("batch_index,n_samples,mse,mae,mean_uncertainty,triggered"));
        assert_eq!(csv.lines().count(), 1 + 5);
        assert!(out.join(format!("aggregate_full_seed{seed}.json")).exists());
    }
    let agg = fs::read_to_string(out.join("aggregate_full.json")).unwrap();
    assert!(agg.contains("\"mode\": \"full\""), "{agg}");
    assert!(agg.contains("\"mse_std\""), "{agg}");

    // Overrides go through the same checkpoints.
    let frozen =
        run(&["run-online", "--config", cfg, "--mode", "frozen", "--seed", "7"]);
    assert_ok(&frozen);
    assert!(out.join("batches_frozen_seed7.csv").exists());

    let rep_dir = tmp.path().join("report");
    let rep = run(&["report", out.to_str().unwrap(), "--out", rep_dir.to_str().unwrap()]);
    assert_ok(&rep);
    let long = fs::read_to_string(rep_dir.join("long_mse.csv")).unwrap();
    assert_eq!(long.lines().next().unwrap(), "batch_index,series,value");
    // One row per input row: three runs of 5 batches each.
    assert_eq!(long.lines().count(), 1 + 15);
    let sweep = fs::read_to_string(rep_dir.join("kappa_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 4);
    assert_eq!(sweep.lines().next().unwrap(), "kappa_trig,update_frequency");
}

#[test]
fn ue_pretraining_requires_a_forecaster_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(&tmp.path().join("run.cfg"), &tmp.path().join("runs"));
    let out = run(&["pretrain", "--kind", "ue", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("pretrain --kind forecaster first"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn config_problems_exit_one_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["gen-data", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("/definitely/not/here.cfg"), "{}", stderr(&missing));

    let bad = tmp.path().join("bad.cfg");
    write_config(&bad, &tmp.path().join("runs"));
    let text = fs::read_to_string(&bad).unwrap().replace("mode = full", "moed = full");
    fs::write(&bad, text).unwrap();
    let out = run(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("moed"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let bad = run(&["frobnicate"]);
    assert_eq!(bad.status.code(), Some(1));
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("run-online"));
}

#[test]
fn gradcheck_passes_and_prints_each_component() {
    let out = run(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for name in ["calibrator", "expert_through_forecaster", "ue_l1"] {
        assert!(text.contains(name), "{text}");
    }
    assert!(text.contains("all gradients within"), "{text}");
}

#[test]
fn env_var_overrides_config_out_but_the_flag_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(&tmp.path().join("run.cfg"), &tmp.path().join("cfg_out"));
    let env_dir = tmp.path().join("env_out");
    let flag_dir = tmp.path().join("flag_out");

    let out = Command::new(env!("CARGO_BIN_EXE_undercali"))
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("UNDERCALI_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(env_dir.join("stream.jsonl").exists());
    assert!(!tmp.path().join("cfg_out").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_undercali"))
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .args(["--out", flag_dir.to_str().unwrap()])
        .env("UNDERCALI_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(flag_dir.join("stream.jsonl").exists());
}

#[test]
fn report_on_an_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no batches_"), "{}", stderr(&out));
}
