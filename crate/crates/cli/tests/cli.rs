//! End-to-end tests of the `mmfuse` binary: every verb, both failure exit
//! codes, and the output-root override. Each test spawns the real binary
//! with an explicit environment, so nothing here races on process state.

use mmfuse::encoders::{EncoderKind, EncoderSpec};
use mmfuse::experiment::{
    DatasetSection, ExperimentConfig, RobustnessSection, TrainingSection,
};
use mmfuse::fusion::FusionSpec;
use mmfuse::perturb::PerturbFamily;
use mmfuse::report::{to_canonical_json, SCHEMA_VERSION};
use mmfuse::training::{OptimizerKind, TrainConfig};
use std::path::Path;
use std::process::{Command, Output};

fn mmfuse() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmfuse"))
}

fn mlp(in_dim: usize, out_dim: usize) -> EncoderSpec {
    EncoderSpec {
        kind: EncoderKind::Mlp,
        in_shape: vec![in_dim],
        hidden_dims: vec![4],
        out_dim,
        seed: 0,
        positional: true,
    }
}

fn small_config(output_dir: &str, epochs: usize, lr: f64) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        dataset: DatasetSection::Redundant {
            modalities: 2,
            dims: vec![2, 2],
            n: 60,
            noise: 0.1,
        },
        encoders: vec![mlp(2, 3), mlp(2, 3)],
        fusion: FusionSpec::Lf,
        objective: vec![],
        training: TrainingSection::Supervised {
            cfg: TrainConfig {
                epochs,
                batch_size: 16,
                learning_rate: lr,
                optimizer: OptimizerKind::Sgd { momentum: 0.9 },
                patience: None,
                seed: 0,
            },
        },
        robustness: RobustnessSection {
            families: vec![PerturbFamily::EntryDrop, PerturbFamily::EntryDrop],
            levels: vec![0.0, 0.5, 1.0],
            metric: None,
            seed: None,
        },
        seeds: vec![0, 1],
        output_dir: output_dir.to_string(),
    }
}

fn write_config(path: &Path, cfg: &ExperimentConfig) {
    std::fs::write(path, to_canonical_json(cfg).unwrap()).unwrap();
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {text}"))
}

#[test]
fn validate_accepts_good_configs_and_rejects_bad_ones_with_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    write_config(&good, &small_config("runs/demo", 1, 0.1));
    let out = mmfuse().arg("validate").arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("config ok"));

    // encoder width disagrees with the dataset
    let mut cfg = small_config("runs/demo", 1, 0.1);
    cfg.encoders[0] = mlp(7, 3);
    let bad = dir.path().join("bad.json");
    write_config(&bad, &cfg);
    let out = mmfuse().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["exit_code"], 2);
    let msg = err["error"].as_str().unwrap();
    assert!(msg.contains('7') && msg.contains('2'), "names the dims: {msg}");

    // not JSON at all
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{oops").unwrap();
    let out = mmfuse().arg("validate").arg(&broken).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit_code"], 2);

    // missing file is an environment problem, not a config problem
    let out = mmfuse()
        .arg("validate")
        .arg(dir.path().join("nope.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_honors_the_output_root_and_the_run_audits_clean() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let cfg_path = dir.path().join("cfg.json");
    write_config(&cfg_path, &small_config("runs/exp_a", 1, 0.1));

    let out = mmfuse()
        .arg("run")
        .arg(&cfg_path)
        .env("MMFUSE_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let run_dir = root.join("runs/exp_a");
    assert!(run_dir.join("manifest.json").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2 requested, 2 completed"), "{stdout}");
    assert!(stdout.contains("accuracy:"), "{stdout}");

    // the inspection verbs find the same relative path under the root
    let out = mmfuse()
        .arg("audit")
        .arg("runs/exp_a")
        .env("MMFUSE_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("audit prints JSON");
    assert_eq!(report["problems"].as_array().unwrap().len(), 0);
    assert_eq!(report["seeds_checked"], serde_json::json!([0, 1]));
}

#[test]
fn audit_exits_nonzero_on_tampered_results() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    write_config(
        &cfg_path,
        &small_config(&run_dir.display().to_string(), 1, 0.1),
    );
    assert_eq!(
        mmfuse().arg("run").arg(&cfg_path).output().unwrap().status.code(),
        Some(0)
    );

    let reports_path = run_dir.join("seed_0/reports.json");
    let doctored = std::fs::read_to_string(&reports_path)
        .unwrap()
        .replacen("\"accuracy\": 0.", "\"accuracy\": 1.", 1);
    std::fs::write(&reports_path, doctored).unwrap();

    let out = mmfuse().arg("audit").arg(&run_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("audit prints JSON");
    assert!(!report["problems"].as_array().unwrap().is_empty());
    assert_eq!(stderr_json(&out)["exit_code"], 3);
}

#[test]
fn compare_and_plot_work_on_finished_runs_and_refuse_incomplete_ones() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("trained");
    let untrained = dir.path().join("untrained");
    let cfg_a = dir.path().join("a.json");
    let cfg_b = dir.path().join("b.json");
    write_config(&cfg_a, &small_config(&trained.display().to_string(), 8, 0.1));
    write_config(
        &cfg_b,
        &small_config(&untrained.display().to_string(), 1, 0.0),
    );
    for cfg in [&cfg_a, &cfg_b] {
        assert_eq!(
            mmfuse().arg("run").arg(cfg).output().unwrap().status.code(),
            Some(0)
        );
    }

    let out_dir = dir.path().join("cmp");
    let out = mmfuse()
        .arg("compare")
        .arg(&trained)
        .arg("--baseline")
        .arg(&untrained)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("model,"), "prints the table: {stdout}");
    assert!(stdout.contains("trained") && stdout.contains("untrained"));
    let csv = std::fs::read_to_string(out_dir.join("leaderboard.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + two rows");
    assert!(out_dir.join("tradeoff.svg").exists());

    let out = mmfuse().arg("plot").arg(&trained).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let svgs: Vec<_> = std::fs::read_dir(trained.join("plots"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(svgs.len(), 2, "one figure per partition");

    // a directory without a manifest was never completed
    let half = dir.path().join("half");
    std::fs::create_dir_all(&half).unwrap();
    std::fs::write(half.join("config.json"), "{}").unwrap();
    let out = mmfuse()
        .arg("compare")
        .arg(&half)
        .arg("--baseline")
        .arg(&untrained)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["error"]
        .as_str()
        .unwrap()
        .contains("manifest"));
}
