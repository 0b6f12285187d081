//! End-to-end tests of the `nnl` binary: every command is exercised through
//! a real process, and artifacts are read back with the library.

use std::path::Path;
use std::process::{Command, Output};

use nnl_core::hebbian::{init_filters, load_filter_bank};

fn nnl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnl"))
        .args(args)
        .output()
        .expect("spawn nnl binary")
}

/// Runs the binary, asserting success; returns stdout.
fn run_ok(args: &[&str]) -> String {
    let out = nnl(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

/// Runs the binary, asserting failure; returns (exit code, stderr).
fn run_err(args: &[&str]) -> (i32, String) {
    let out = nnl(args);
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded\nstdout: {}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).expect("write test file");
}

/// Pulls the percentage out of a report line like "top-1 error  : 12.34%".
fn report_value(stdout: &str, label: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(label))
        .unwrap_or_else(|| panic!("no '{label}' line in:\n{stdout}"));
    line.split(':')
        .nth(1)
        .expect("value after colon")
        .trim()
        .trim_end_matches('%')
        .parse()
        .expect("numeric value")
}

#[test]
fn train_filters_with_zero_epochs_writes_seeded_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    let out = dir.path().join("bank.nnlf");
    write(
        &cfg,
        "[data]\n\
         train = synth:std:2:11\n\
         [hebbian]\n\
         epochs = 0\n\
         [block]\n\
         k = 8\n\
         w = 3\n",
    );
    run_ok(&[
        "train-filters",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "42",
        "--out",
        out.to_str().unwrap(),
    ]);
    let bank = load_filter_bank(&out).unwrap();
    let expected = init_filters(8, 3 * 3 * 3, 42);
    assert_eq!(bank.m.data(), expected.data(), "bank must equal seeded init");
    assert!(bank.win_counts.iter().all(|&w| w == 0));
}

const PIPELINE_CFG: &str = "\
[data]
train = synth:std:800:40
test = synth:std:400:41
[hebbian]
lr = 0.02
epochs = 12
batch = 1000
[block]
type = nnl
k = 32
w = 4
n = 5
st = 1
wp = 11
stp = 2
m = 2
delta = 0.2
[train]
schedule = constant
lr = 1e-3
epochs = 10
batch = 100
[run]
seed = 33
";

#[test]
fn pipeline_train_filters_classifier_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write(&cfg, PIPELINE_CFG);
    let cfg = cfg.to_str().unwrap();
    let bank = dir.path().join("bank.nnlf");
    let bank = bank.to_str().unwrap();
    let model = dir.path().join("model.nnlm");
    let model = model.to_str().unwrap();
    let log = dir.path().join("log.csv");

    let stdout = run_ok(&["train-filters", "--config", cfg, "--out", bank]);
    assert!(stdout.contains("trained 32 filters"), "stdout: {stdout}");

    // Atlas export twice -> byte-identical image.
    let a1 = dir.path().join("a1.png");
    let a2 = dir.path().join("a2.png");
    run_ok(&["export-atlas", "--filters", bank, "--out", a1.to_str().unwrap(), "--columns", "8"]);
    run_ok(&["export-atlas", "--filters", bank, "--out", a2.to_str().unwrap(), "--columns", "8"]);
    assert_eq!(std::fs::read(&a1).unwrap(), std::fs::read(&a2).unwrap());

    let stdout = run_ok(&["inspect", bank]);
    assert!(stdout.contains("filters: 32"), "stdout: {stdout}");
    assert!(stdout.contains("window: 4"), "stdout: {stdout}");

    run_ok(&[
        "train-classifier",
        "--config",
        cfg,
        "--filters",
        bank,
        "--out",
        model,
        "--log",
        log.to_str().unwrap(),
    ]);
    let log_text = std::fs::read_to_string(&log).unwrap();
    let mut lines = log_text.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_error,test_error,loss"));
    assert_eq!(lines.count(), 10, "one row per classifier epoch");

    let stdout = run_ok(&["inspect", model]);
    assert!(stdout.contains("block 1: nnl"), "stdout: {stdout}");
    assert!(stdout.contains("classes: 10"), "stdout: {stdout}");

    // Plain evaluation on the held-out set: well above chance (90% error).
    let csv = dir.path().join("eval.csv");
    let plain = run_ok(&[
        "eval", "--model", model, "--data", "synth:std:400:41", "--csv",
        csv.to_str().unwrap(),
    ]);
    let top1 = report_value(&plain, "top-1 error");
    assert!(top1 < 45.0, "pipeline test error {top1}% not under 45%");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("dataset,scope,n_samples,error_percent\n"));

    // Degenerate shadow (zero columns, factor 1) must not change anything.
    let shadow0 = run_ok(&[
        "eval", "--model", model, "--data", "synth:std:400:41", "--shadow",
        "cols=0,factor=1.0",
    ]);
    assert_eq!(report_value(&shadow0, "top-1 error"), top1);
    assert_eq!(
        report_value(&shadow0, "top-5 error"),
        report_value(&plain, "top-5 error")
    );

    // A real shadow runs and reports its spec.
    let shadowed = run_ok(&[
        "eval", "--model", model, "--data", "synth:std:400:41", "--shadow",
        "cols=25,factor=0.3",
    ]);
    assert!(shadowed.contains("shadow"), "stdout: {shadowed}");

    // The normalized-patch network is exactly scale invariant, so a uniform
    // intensity rescale cannot move its error.
    let scaled = run_ok(&[
        "eval", "--model", model, "--data", "synth:std:400:41", "--scale", "0.3",
    ]);
    assert_eq!(report_value(&scaled, "top-1 error"), top1);
}

const SMALL_FILTER_CFG: &str = "\
[data]
train = synth:std:100:7
test = synth:std:60:8
[hebbian]
lr = 0.02
epochs = 3
batch = 500
[block]
type = nnl
k = 16
w = 4
n = 5
wp = 11
stp = 2
[train]
schedule = constant
lr = 1e-3
epochs = 5
batch = 50
[run]
seed = 12
";

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write(&cfg, SMALL_FILTER_CFG);
    let cfg = cfg.to_str().unwrap();
    let b1 = dir.path().join("t1.nnlf");
    let b8 = dir.path().join("t8.nnlf");
    run_ok(&["train-filters", "--config", cfg, "--threads", "1", "--out", b1.to_str().unwrap()]);
    run_ok(&["train-filters", "--config", cfg, "--threads", "8", "--out", b8.to_str().unwrap()]);
    let bytes1 = std::fs::read(&b1).unwrap();
    assert_eq!(bytes1, std::fs::read(&b8).unwrap(), ".nnlf differs across thread counts");

    let m1 = dir.path().join("m1.nnlm");
    let m8 = dir.path().join("m8.nnlm");
    run_ok(&[
        "train-classifier", "--config", cfg, "--filters", b1.to_str().unwrap(),
        "--threads", "1", "--out", m1.to_str().unwrap(),
    ]);
    run_ok(&[
        "train-classifier", "--config", cfg, "--filters", b1.to_str().unwrap(),
        "--threads", "8", "--out", m8.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&m1).unwrap(),
        std::fs::read(&m8).unwrap(),
        ".nnlm differs across thread counts"
    );
}

const E2E_CFG: &str = "\
[data]
train = synth:std:60:1
test = synth:std:40:2
[block]
type = conv
k = 8
w = 4
st = 2
wp = 5
stp = 3
[train]
schedule = constant
lr = 1e-3
epochs = 2
batch = 20
[run]
seed = 5
";

#[test]
fn train_e2e_writes_model_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write(&cfg, E2E_CFG);
    let model = dir.path().join("e2e.nnlm");
    let log = dir.path().join("e2e.csv");
    run_ok(&[
        "train-e2e",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    let stdout = run_ok(&["inspect", model.to_str().unwrap()]);
    assert!(stdout.contains("block 1: conv K=8"), "stdout: {stdout}");
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 3, "header + one row per epoch");

    // The e2e trainer rejects configs whose blocks are NNL typed.
    let nnl_cfg = dir.path().join("wrong.ini");
    write(&nnl_cfg, &E2E_CFG.replace("type = conv", "type = nnl"));
    let (code, stderr) = run_err(&["train-e2e", "--config", nnl_cfg.to_str().unwrap(), "--out", "x.nnlm"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("conv blocks only"), "stderr: {stderr}");
}

const MULTI_BLOCK_CFG: &str = "\
[data]
train = synth:std:100:7
test = synth:std:60:8
[hebbian]
lr = 0.02
epochs = 3
batch = 500
[block]
type = nnl
k = 8
w = 3
n = 5
wp = 11
stp = 2
[block]
type = nnl
k = 8
w = 5
n = 5
wp = 9
stp = 2
[train]
schedule = constant
lr = 1e-3
epochs = 5
batch = 50
[run]
seed = 12
";

/// Architectures with several blocks run one `train-filters` per block and
/// hand the classifier all the banks at once.
#[test]
fn multi_block_pipeline_trains_one_bank_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write(&cfg, MULTI_BLOCK_CFG);
    let cfg = cfg.to_str().unwrap();
    let b1 = dir.path().join("w3.nnlf");
    let b2 = dir.path().join("w5.nnlf");
    run_ok(&["train-filters", "--config", cfg, "--block", "1", "--out", b1.to_str().unwrap()]);
    run_ok(&["train-filters", "--config", cfg, "--block", "2", "--out", b2.to_str().unwrap()]);
    let w3 = run_ok(&["inspect", b1.to_str().unwrap()]);
    assert!(w3.contains("window: 3"), "stdout: {w3}");
    let w5 = run_ok(&["inspect", b2.to_str().unwrap()]);
    assert!(w5.contains("window: 5"), "stdout: {w5}");

    let model = dir.path().join("two.nnlm");
    let filters = format!("{},{}", b1.to_str().unwrap(), b2.to_str().unwrap());
    run_ok(&["train-classifier", "--config", cfg, "--filters", &filters, "--out", model.to_str().unwrap()]);
    let stdout = run_ok(&["inspect", model.to_str().unwrap()]);
    assert!(stdout.contains("blocks: 2"), "stdout: {stdout}");
    assert!(stdout.contains("block 1: nnl  K=8 window=3"), "stdout: {stdout}");
    assert!(stdout.contains("block 2: nnl  K=8 window=5"), "stdout: {stdout}");
    let eval = run_ok(&["eval", "--model", model.to_str().unwrap(), "--data", "synth:std:60:8"]);
    assert!(eval.contains("top-1 error"), "stdout: {eval}");

    // Handing the two banks in the wrong order is caught by shape checks.
    let swapped = format!("{},{}", b2.to_str().unwrap(), b1.to_str().unwrap());
    let (code, stderr) = run_err(&["train-classifier", "--config", cfg, "--filters", &swapped, "--out", "x.nnlm"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("window"), "stderr: {stderr}");

    // A block index past the architecture is a flagged user error.
    let (code, stderr) = run_err(&["train-filters", "--config", cfg, "--block", "3", "--out", "x.nnlf"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("out of range"), "stderr: {stderr}");
}

#[test]
fn transfer_reports_mean_and_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write(&cfg, SMALL_FILTER_CFG);
    let bank = dir.path().join("bank.nnlf");
    run_ok(&["train-filters", "--config", cfg.to_str().unwrap(), "--out", bank.to_str().unwrap()]);

    // Same architecture, but the data section now points at the other
    // synthetic family: filters transfer, only the read-out retrains.
    let transfer_cfg = dir.path().join("transfer.ini");
    write(
        &transfer_cfg,
        &SMALL_FILTER_CFG
            .replace("train = synth:std:100:7", "train = synth:alt:100:3")
            .replace("test = synth:std:60:8", "test = synth:alt:60:4"),
    );
    let log = dir.path().join("runs.csv");
    let stdout = run_ok(&[
        "transfer",
        "--config",
        transfer_cfg.to_str().unwrap(),
        "--filters",
        bank.to_str().unwrap(),
        "--runs",
        "2",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(stdout.contains("transfer top-1 error"), "stdout: {stdout}");
    assert!(stdout.contains("over 2 runs"), "stdout: {stdout}");
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().next(), Some("run,top1_error_percent"));
    assert_eq!(log_text.lines().count(), 3);
}

#[test]
fn inspect_normalizes_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write(&cfg, PIPELINE_CFG);
    let stdout = run_ok(&["inspect", cfg.to_str().unwrap()]);
    assert!(stdout.contains("[block]"), "stdout: {stdout}");
    assert!(stdout.contains("k = 32"), "stdout: {stdout}");
    assert!(stdout.contains("schedule = constant"), "stdout: {stdout}");
}

#[test]
fn user_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key.
    let cfg = dir.path().join("typo.ini");
    write(&cfg, "[hebbian]\nepocs = 5\n");
    let (code, stderr) = run_err(&["train-filters", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("unknown key"), "stderr: {stderr}");

    // Missing model file.
    let (code, _) = run_err(&["eval", "--model", "no-such.nnlm", "--data", "synth:std:5:1"]);
    assert_eq!(code, 1);

    // Unknown flag (argument parser error).
    let (code, _) = run_err(&["eval", "--nope"]);
    assert_eq!(code, 1);

    // Unknown subcommand.
    let (code, _) = run_err(&["frobnicate"]);
    assert_eq!(code, 1);

    // Corrupt model file.
    let mdl = dir.path().join("x.nnlm");
    write(&mdl, "junk");
    let (code, _) = run_err(&["eval", "--model", mdl.to_str().unwrap(), "--data", "synth:std:5:1"]);
    assert_eq!(code, 1);

    // Inspect on a file that is neither artifact nor config.
    let junk = dir.path().join("junk.txt");
    write(&junk, "key = value before any section\n");
    let (code, stderr) = run_err(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("not a filter bank"), "stderr: {stderr}");
}

#[test]
fn help_exits_zero() {
    let out = nnl(&["--help"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "train-filters",
        "train-classifier",
        "train-e2e",
        "eval",
        "transfer",
        "export-atlas",
        "inspect",
    ] {
        assert!(stdout.contains(cmd), "help missing {cmd}:\n{stdout}");
    }
}
