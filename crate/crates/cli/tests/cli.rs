//! End-to-end exercises of the `ldfv` binary on a tiny Burgers recipe.

use std::path::Path;
use std::process::{Command, Output};

fn ldfv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldfv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = "
[system]
kind = burgers
viscosity = 0.05

[dataset]
fine_nx = 32
fine_ny = 32
fine_dt = 0.002
spatial_factor = 4
temporal_factor = 4
warmup = 0.01
steps = 16
train_count = 1
test_count = 1
train_seed = 0
test_seed = 50
ic_amplitude = 0.5

[model]
layers = 1
channels = 2
k_max = 2
init_scale = 0.001

[train]
epochs = 2
batch_size = 2
sample_length = 2
learning_rate = 0.001

[run]
rollout_steps = 3
";
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_gen_train_eval_rollout_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();

    let gen = ldfv(&["gen", "--config", cfg], &out);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(out.join("dataset/manifest.json").exists());
    assert!(out.join("dataset/train/000.ldfv").exists());
    assert!(out.join("dataset/test/000.ldfv").exists());
    assert!(out.join("config.txt").exists(), "config echo missing");

    let train = ldfv(&["train", "--config", cfg], &out);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ckpt = out.join("train/final.ldfv");
    assert!(ckpt.exists());
    assert!(out.join("train/loss.csv").exists());

    let eval = ldfv(
        &["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()],
        &out,
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(out.join("eval/report.json").exists());
    assert!(out.join("eval/pcc.csv").exists());

    let eval_p = ldfv(
        &["eval", "--config", cfg, "--checkpoint", "physics-only"],
        &out,
    );
    assert!(eval_p.status.success(), "{}", String::from_utf8_lossy(&eval_p.stderr));

    let initial = out.join("dataset/test/000.ldfv");
    let roll = ldfv(
        &[
            "rollout",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--initial",
            initial.to_str().unwrap(),
        ],
        &out,
    );
    assert!(roll.status.success(), "{}", String::from_utf8_lossy(&roll.stderr));
    let rolled = ldfv_core::io::load_trajectory(out.join("rollout.ldfv")).unwrap();
    assert_eq!(rolled.states.len(), 4); // initial + rollout_steps

    let spec = ldfv(
        &[
            "spectrum",
            "--config",
            cfg,
            "--trajectory",
            out.join("rollout.ldfv").to_str().unwrap(),
            "--step",
            "1",
        ],
        &out,
    );
    assert!(spec.status.success(), "{}", String::from_utf8_lossy(&spec.stderr));
    let csv = std::fs::read_to_string(out.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("k,E\n"));
    assert!(csv.lines().count() > 3);
}

#[test]
fn rollout_zero_steps_keeps_only_the_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg_path = tiny_config(tmp.path());
    let cfg = cfg_path.to_str().unwrap();

    let gen = ldfv(&["gen", "--config", cfg], &out);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let initial = out.join("dataset/test/000.ldfv");
    let roll = ldfv(
        &[
            "rollout",
            "--config",
            cfg,
            "--checkpoint",
            "physics-only",
            "--initial",
            initial.to_str().unwrap(),
            "--steps",
            "0",
        ],
        &out,
    );
    assert!(roll.status.success(), "{}", String::from_utf8_lossy(&roll.stderr));
    let rolled = ldfv_core::io::load_trajectory(out.join("rollout.ldfv")).unwrap();
    assert_eq!(rolled.states.len(), 1);
}

#[test]
fn config_errors_are_machine_parsable_and_list_all_offenders() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "[run]\nsed = 1\n[dataset]\nfine_nz = 3\n").unwrap();
    let gen = ldfv(&["gen", "--config", bad.to_str().unwrap()], &out);
    assert!(!gen.status.success());
    let err = String::from_utf8_lossy(&gen.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("run.sed"), "{err}");
    assert!(err.contains("dataset.fine_nz"), "{err}");
}

#[test]
fn bench_reports_a_speedup() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg_path = tiny_config(tmp.path());
    let bench = ldfv(
        &[
            "bench",
            "--config",
            cfg_path.to_str().unwrap(),
            "--horizon",
            "0.064",
        ],
        &out,
    );
    assert!(bench.status.success(), "{}", String::from_utf8_lossy(&bench.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let speedup = report["speedup_a_over_b"].as_f64().unwrap();
    assert!(speedup.is_finite() && speedup > 0.0);
}
