//! End-to-end checks of the `ini` binary: every subcommand, the exit-code
//! contract (0 success, 1 verification failure, 2 bad configuration,
//! 3 runtime failure), and determinism of the training loop as observed
//! through the command line.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use inner_imaging::train::strip_wall_ms;
use tempfile::TempDir;

fn ini() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ini"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to launch the ini binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A joint-gate network small enough that two epochs on synthetic data
/// finish in well under a second.
fn tiny_config() -> &'static str {
    "family = preact_resnet\n\
     input_channels = 1\n\
     input_height = 8\n\
     input_width = 8\n\
     classes = 3\n\
     base_width = 4\n\
     blocks_per_stage = 1\n\
     attention = ini\n\
     preset = simple-3\n\
     t = 4\n\
     joint = true\n\
     epochs = 2\n\
     batch_size = 16\n\
     base_lr = 0.05\n\
     lr_drops =\n\
     synth_train = 48\n\
     synth_test = 24\n\
     metrics_path = metrics.jsonl\n\
     checkpoint_path = model.ck\n"
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, tiny_config()).unwrap();
    path
}

fn metrics_lines(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(strip_wall_ms)
        .collect()
}

#[test]
fn verify_theory_scope_passes() {
    let out = run(ini().args(["verify", "--scope", "theory"]));
    let text = stdout_of(&out);
    assert!(out.status.success(), "stdout: {text}");
    assert!(text.contains("\"name\":\"theory/one-hot-proportionality\""));
    assert!(text.contains("\"name\":\"theory/se-equivalence\""));
    assert!(text.contains("\"name\":\"theory/channels-groups-split\""));
    assert!(!text.contains("\"status\":\"fail\""));
    assert!(text.contains("verification: 3 checks passed"));
}

#[test]
fn verify_groups_scope_passes() {
    let out = run(ini().args(["verify", "--scope", "groups"]));
    let text = stdout_of(&out);
    assert!(out.status.success(), "stdout: {text}");
    assert!(text.contains("\"status\":\"pass\""));
    assert!(!text.contains("\"status\":\"fail\""));
    assert!(text.contains("checks passed"));
}

#[test]
fn an_injected_gradient_fault_is_caught_and_exits_nonzero() {
    let out = run(ini().args([
        "verify",
        "--scope",
        "grad",
        "--inject-fault",
        "wrong-sign-grad",
    ]));
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(1), "stdout: {text}");
    assert!(text.contains("\"name\":\"grad/plain-square-3\",\"status\":\"fail\""));
    assert!(text.contains("of 9 checks FAILED"));
}

#[test]
fn train_eval_resume_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());

    let out = run(ini()
        .current_dir(dir.path())
        .args(["train", "--config"])
        .arg(&cfg));
    let text = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(text.contains("\"epoch\":0"));
    assert!(text.contains("trained 2 epochs"));
    assert!(text.contains("checkpoint: model.ck"));
    assert_eq!(metrics_lines(dir.path()).len(), 2);
    assert!(dir.path().join("model.ck").is_file());

    // Evaluation re-scores the stored parameters on the held-out split and
    // must reproduce the final epoch's validation numbers exactly.
    let out = run(ini()
        .current_dir(dir.path())
        .args(["eval", "--checkpoint", "model.ck"]));
    let eval_text = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(eval_text.contains("\"split\":\"test\""));
    assert!(eval_text.contains("\"examples\":24"));
    let last_epoch = metrics_lines(dir.path()).pop().unwrap();
    let val_loss = last_epoch
        .split("\"val_loss\":")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .unwrap();
    assert!(
        eval_text.contains(&format!("\"loss\":{val_loss}")),
        "eval {eval_text} vs epoch {last_epoch}"
    );

    // Resuming with a higher epoch budget picks up where training stopped.
    let out = run(ini().current_dir(dir.path()).args([
        "resume",
        "--checkpoint",
        "model.ck",
        "--set",
        "epochs=3",
    ]));
    let text = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(text.contains("\"epoch\":2"));
    assert!(text.contains("resumed for 1 epochs"));
    assert_eq!(metrics_lines(dir.path()).len(), 3);
}

#[test]
fn the_binary_is_a_thin_shell_over_the_library() {
    use inner_imaging::config::ExperimentConfig;
    use inner_imaging::experiment::run_train;
    use inner_imaging::train::EpochRecord;

    let bin_dir = TempDir::new().unwrap();
    let cfg = write_config(bin_dir.path());
    let out = run(ini()
        .current_dir(bin_dir.path())
        .args(["train", "--config"])
        .arg(&cfg));
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    // Drive the library directly with the same configuration (output paths
    // aside) and diff the results.
    let lib_dir = TempDir::new().unwrap();
    let mut config = ExperimentConfig::parse(tiny_config()).unwrap();
    config.metrics_path = lib_dir.path().join("metrics.jsonl").to_string_lossy().into_owned();
    config.checkpoint_path = lib_dir.path().join("model.ck").to_string_lossy().into_owned();
    let mut quiet = |_: &EpochRecord| {};
    let outcome = run_train(&config, &mut quiet).unwrap();

    let lib_lines: Vec<String> = outcome
        .records
        .iter()
        .map(|r| strip_wall_ms(&r.to_json_line()))
        .collect();
    assert_eq!(metrics_lines(bin_dir.path()), lib_lines);
    assert!(
        stdout_of(&out).contains(&format!("{} trainable parameters", outcome.param_count)),
        "binary reported a different parameter count"
    );
}

#[test]
fn twin_training_runs_match_bit_for_bit() {
    let mut transcripts = Vec::new();
    for _ in 0..2 {
        let dir = TempDir::new().unwrap();
        let cfg = write_config(dir.path());
        let out = run(ini()
            .current_dir(dir.path())
            .args(["train", "--config"])
            .arg(&cfg));
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
        transcripts.push(metrics_lines(dir.path()));
    }
    assert_eq!(transcripts[0], transcripts[1]);
}

#[test]
fn inspect_groups_prints_each_stage() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let out = run(ini()
        .current_dir(dir.path())
        .args(["inspect-groups", "--config"])
        .arg(&cfg));
    let text = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(text.contains("preset simple-3"));
    assert!(text.contains("stage 0: 4 channels, joint map 2x4"));
    assert!(text.contains("stage 2: 16 channels, joint map 2x16"));
    assert!(text.contains("shape 2x2:"));
    assert!(text.contains("overlap min"));
}

#[test]
fn unknown_override_keys_exit_with_the_config_code() {
    let out = run(ini().args(["train", "--set", "bogus_key=1"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bogus_key"));
}

#[test]
fn a_missing_config_file_exits_with_the_config_code() {
    let out = run(ini().args(["train", "--config", "/nonexistent/run.cfg"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("error:"));
}

#[test]
fn a_missing_checkpoint_exits_with_the_runtime_code() {
    let out = run(ini().args(["eval", "--checkpoint", "/nonexistent/model.ck"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("error:"));
}

#[test]
fn an_unknown_preset_exits_with_the_config_code() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "attention = ini\npreset = squircle-1\n").unwrap();
    let out = run(ini()
        .current_dir(dir.path())
        .args(["inspect-groups", "--config"])
        .arg(&cfg));
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("squircle-1"));
}
