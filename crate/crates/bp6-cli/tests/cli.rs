//! End-to-end tests that drive the compiled `bp6` binary.

use bp6_core::data::{load_store, read_sidecar};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bp6() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bp6"));
    cmd.env_remove("BP6_SEED");
    cmd
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed (code {:?}):\n{}",
        out.status.code(),
        stderr_of(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr:\n{}", stderr_of(out));
}

fn repo_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(name)
}

#[test]
fn synth_is_deterministic_and_records_its_settings() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bp6s");
    let b = dir.path().join("b.bp6s");
    assert_ok(&bp6().args(["synth", "--n", "6", "--seed", "7"]).arg("--out").arg(&a).output().unwrap());
    assert_ok(&bp6().args(["synth", "--n", "6", "--seed", "7"]).arg("--out").arg(&b).output().unwrap());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let sidecar = read_sidecar(&a).unwrap();
    assert_eq!(sidecar.seed, 7);
    assert_eq!(sidecar.total, 6);
    assert_eq!(sidecar.config_hash.len(), 64);

    let samples = load_store(&a).unwrap();
    assert_eq!(samples.len(), 6);
    assert!(samples.iter().all(|s| s.label.is_some()));
}

#[test]
fn the_seed_env_var_applies_only_when_the_flag_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    let by_flag = dir.path().join("flag.bp6s");
    let by_env = dir.path().join("env.bp6s");
    let flag_wins = dir.path().join("wins.bp6s");

    assert_ok(&bp6().args(["synth", "--n", "4", "--seed", "7"]).arg("--out").arg(&by_flag).output().unwrap());
    assert_ok(
        &bp6()
            .env("BP6_SEED", "7")
            .args(["synth", "--n", "4"])
            .arg("--out")
            .arg(&by_env)
            .output()
            .unwrap(),
    );
    assert_ok(
        &bp6()
            .env("BP6_SEED", "3")
            .args(["synth", "--n", "4", "--seed", "7"])
            .arg("--out")
            .arg(&flag_wins)
            .output()
            .unwrap(),
    );
    let reference = std::fs::read(&by_flag).unwrap();
    assert_eq!(std::fs::read(&by_env).unwrap(), reference);
    assert_eq!(std::fs::read(&flag_wins).unwrap(), reference);

    let bad = bp6()
        .env("BP6_SEED", "not-a-number")
        .args(["synth", "--n", "4"])
        .arg("--out")
        .arg(dir.path().join("bad.bp6s"))
        .output()
        .unwrap();
    assert_exit(&bad, 2);
    assert!(stderr_of(&bad).contains("BP6_SEED"));
}

#[test]
fn the_reference_config_hashes_like_the_built_in_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let with_cfg = dir.path().join("cfg.bp6s");
    let without = dir.path().join("plain.bp6s");
    assert_ok(
        &bp6()
            .args(["synth", "--n", "3", "--seed", "1"])
            .arg("--out")
            .arg(&with_cfg)
            .arg("--config")
            .arg(repo_file("paper.cfg"))
            .output()
            .unwrap(),
    );
    assert_ok(&bp6().args(["synth", "--n", "3", "--seed", "1"]).arg("--out").arg(&without).output().unwrap());
    assert_eq!(
        read_sidecar(&with_cfg).unwrap().config_hash,
        read_sidecar(&without).unwrap().config_hash
    );
}

#[test]
fn denoise_preserves_length_and_rejects_unknown_channel_types() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("signal.txt");
    let mut text = String::from("# synthetic test trace\n");
    for i in 0..400 {
        let t = i as f64 / 100.0;
        let v = (2.0 * std::f64::consts::PI * 1.3 * t).sin() + 0.3 * (i as f64 * 12.9898).sin();
        writeln!(text, "{v}").unwrap();
    }
    std::fs::write(&input, text).unwrap();

    for channel in ["ecg", "ppg"] {
        let out = dir.path().join(format!("{channel}.txt"));
        assert_ok(
            &bp6()
                .arg("denoise")
                .arg("--input")
                .arg(&input)
                .args(["--channel-type", channel, "--fs-hz", "100"])
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap(),
        );
        let produced = std::fs::read_to_string(&out).unwrap();
        let values: Vec<f64> = produced.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(values.len(), 400);
        assert!(values.iter().all(|v| v.is_finite()));
    }

    let bad = bp6()
        .arg("denoise")
        .arg("--input")
        .arg(&input)
        .args(["--channel-type", "emg"])
        .arg("--out")
        .arg(dir.path().join("x.txt"))
        .output()
        .unwrap();
    assert_exit(&bad, 2);
}

/// Deterministic pseudo-noise so recordings have nonzero variance everywhere.
fn wobble(seed: u64, i: usize, col: usize) -> f64 {
    let x = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((i as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add((col as u64).wrapping_mul(0x94d049bb133111eb));
    let x = (x ^ (x >> 31)).wrapping_mul(0x2545f4914f6cdd1d);
    (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn write_recording(path: &Path, rows: usize, seed: u64) {
    let header = [
        "peaks", "ecg", "pleth_1", "pleth_2", "pleth_3", "pleth_4", "pleth_5", "pleth_6", "lc_1",
        "lc_2", "temp_1", "temp_2", "temp_3", "a_x", "a_y", "a_z", "g_x", "g_y", "g_z",
    ];
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..rows {
        let t = i as f64 / 500.0;
        for (col, name) in header.iter().enumerate() {
            if col > 0 {
                text.push(',');
            }
            let v = match *name {
                "peaks" => f64::from(i % 400 == 0),
                "ecg" => (2.0 * std::f64::consts::PI * 1.2 * t).sin() + 0.1 * wobble(seed, i, col),
                _ => wobble(seed, i, col),
            };
            let _ = write!(text, "{v:.6}");
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn preprocess_builds_a_labeled_store_and_names_missing_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    std::fs::create_dir(&raw).unwrap();
    write_recording(&raw.join("s01_run.csv"), 10_000, 11);

    let annotations = dir.path().join("bp.csv");
    std::fs::write(
        &annotations,
        "subject_id,motion_state,bp_sys_end,bp_dia_end\ns01,run,121.5,79.2\n",
    )
    .unwrap();

    let store = dir.path().join("real.bp6s");
    assert_ok(
        &bp6()
            .arg("preprocess")
            .arg("--input-dir")
            .arg(&raw)
            .arg("--annotations")
            .arg(&annotations)
            .arg("--out")
            .arg(&store)
            .args(["--seed", "3"])
            .output()
            .unwrap(),
    );

    let samples = load_store(&store).unwrap();
    assert_eq!(samples.len(), 2, "10000 rows should yield two 5000-sample windows");
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.provenance.subject_id, "s01");
        assert_eq!(s.provenance.window_index, i as u32);
        let label = s.label.unwrap();
        assert!((label[0] - 121.5).abs() < 1e-6 && (label[1] - 79.2).abs() < 1e-6);
        assert!(s.blocks.iter().all(|b| b.iter().all(|v| v.is_finite())));
    }
    let sidecar = read_sidecar(&store).unwrap();
    assert_eq!(sidecar.counts["s01/run"], 2);
    assert_eq!(sidecar.seed, 3);

    let unrelated = dir.path().join("other.csv");
    std::fs::write(
        &unrelated,
        "subject_id,motion_state,bp_sys_end,bp_dia_end\ns99,sit,110,70\n",
    )
    .unwrap();
    let missing = bp6()
        .arg("preprocess")
        .arg("--input-dir")
        .arg(&raw)
        .arg("--annotations")
        .arg(&unrelated)
        .arg("--out")
        .arg(dir.path().join("nope.bp6s"))
        .output()
        .unwrap();
    assert_exit(&missing, 2);
    let err = stderr_of(&missing);
    assert!(err.contains("no annotation for") && err.contains("s01/run"), "stderr: {err}");
}

fn tiny_config(path: &Path, embedding_dim: usize) {
    std::fs::write(
        path,
        format!(
            "[model]\n\
             input_len = 1000\n\
             embedding_dim = {embedding_dim}\n\
             num_experts = 2\n\
             tcn_channels = 4,4,2\n\
             tcn_fc_hidden = 16\n\
             tcn_dropout = 0.1\n\
             cacnn_channels = 6\n\
             cacnn_fc_hidden = 16\n\
             cacnn_dropout = 0.1\n\
             se_reduction = 3\n\
             expert_hidden = 16,8\n\
             \n[train]\n\
             batch_size = 4\n\
             learning_rate = 0.01\n\
             epochs = 2\n\
             k_negatives = 3\n"
        ),
    )
    .unwrap();
}

#[test]
fn train_then_eval_produces_reports_and_guards_checkpoint_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("train.bp6s");
    assert_ok(&bp6().args(["synth", "--n", "12", "--seed", "9"]).arg("--out").arg(&store).output().unwrap());

    let cfg = dir.path().join("tiny.cfg");
    tiny_config(&cfg, 8);
    let out = dir.path().join("run");
    assert_ok(
        &bp6()
            .arg("train")
            .arg("--store")
            .arg(&store)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--seed", "5"])
            .output()
            .unwrap(),
    );

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_mse,train_contrastive,train_total,val_mae_sbp,val_mae_dbp");
    assert_eq!(lines.len(), 3, "two epochs expected:\n{metrics}");

    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 5);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    let best = run["best_epoch"].as_u64().unwrap();
    assert!((1..=2).contains(&best));
    assert!(run["best_val_mae"].as_f64().unwrap().is_finite());
    assert_eq!(run["optimizer_steps"], 4, "8 train samples / batch 4 * 2 epochs");

    let report_dir = dir.path().join("report");
    assert_ok(
        &bp6()
            .arg("eval")
            .arg("--store")
            .arg(&store)
            .arg("--checkpoint")
            .arg(out.join("model.bp6c"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&report_dir)
            .args(["--seed", "5"])
            .output()
            .unwrap(),
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 3, "12 samples split 7:1:2 leave 3 for test");
    assert_eq!(report["seed"], 5);
    for target in ["sbp", "dbp", "map"] {
        let mae = report["targets"][target]["mae"].as_f64().unwrap();
        assert!(mae.is_finite() && mae >= 0.0);
    }
    let per_sample = std::fs::read_to_string(report_dir.join("per_sample.csv")).unwrap();
    assert_eq!(per_sample.lines().count(), 4);
    for name in ["bland_altman_sbp.csv", "bland_altman_dbp.csv", "error_hist_sbp.csv", "error_hist_dbp.csv"] {
        assert!(report_dir.join(name).exists(), "missing {name}");
    }

    // The same checkpoint must be rejected when the configured model differs.
    let wide = dir.path().join("wide.cfg");
    tiny_config(&wide, 16);
    let mismatch = bp6()
        .arg("eval")
        .arg("--store")
        .arg(&store)
        .arg("--checkpoint")
        .arg(out.join("model.bp6c"))
        .arg("--config")
        .arg(&wide)
        .arg("--out")
        .arg(dir.path().join("r2"))
        .args(["--seed", "5"])
        .output()
        .unwrap();
    assert_exit(&mismatch, 2);
    assert!(stderr_of(&mismatch).contains("does not match model shape"), "stderr: {}", stderr_of(&mismatch));
}
