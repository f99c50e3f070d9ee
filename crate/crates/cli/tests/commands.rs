//! End-to-end command behavior on small synthetic experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use diffreg::posterior::gaussian_crps;
use diffreg::sampler::{sample_ensemble, AnalyticGmm};
use diffreg::{make_task, NoiseSchedule, RandomStream, SamplerConfig, TaskName};
use diffreg_cli::commands::{cmd_ablate, cmd_eval, cmd_oracle, cmd_sample, cmd_schedule_dump, cmd_train, Ablation, EvalSource};
use diffreg_cli::{data, ArchKind, ExperimentConfig};

fn tiny(task: TaskName, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_task(task);
    c.n_train = 300;
    c.n_test = 6;
    c.k = 8;
    c.train.epochs = 3;
    c.train.learning_rate = 1e-3;
    c.train.eval_every = 2;
    c.train.val_k = 2;
    c.out = out.to_path_buf();
    c
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.csv")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn every_command_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(TaskName::B, dir.path());
    let run = || {
        let t = cmd_train(&cfg).unwrap();
        cmd_sample(&cfg, &t.checkpoint, None, true).unwrap();
        cmd_eval(&cfg, &EvalSource::Predictions {
            samples: cfg.out.join("samples.csv"),
            truth: None,
        })
        .unwrap();
        cmd_ablate(&cfg, Ablation::Steps, Some(&t.checkpoint), None).unwrap();
        cmd_oracle(&cfg, 500).unwrap();
        cmd_schedule_dump(&cfg).unwrap();
        let files = read_all(dir.path());
        fs::remove_dir_all(dir.path()).unwrap();
        (t.digest, files)
    };
    let (d1, a) = run();
    let (d2, b) = run();
    assert_eq!(d1, d2);
    assert_eq!(a.len(), 11, "{:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs between runs", x.0);
    }
}

#[test]
fn train_writes_artifacts_and_learns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::B, dir.path());
    cfg.train.epochs = 10;
    cfg.train.checkpoint_every = 5;
    let t = cmd_train(&cfg).unwrap();
    assert!(t.last_loss < t.first_loss);
    for f in ["checkpoint.json", "loss.csv", "config.lock", "checkpoint_epoch5.json", "checkpoint_epoch10.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ck: diffreg::Checkpoint = serde_json::from_str(&fs::read_to_string(&t.checkpoint).unwrap()).unwrap();
    assert_eq!(ck.config_hash, cfg.hash());
    let lock = ExperimentConfig::from_json(&fs::read_to_string(dir.path().join("config.lock")).unwrap()).unwrap();
    assert_eq!(lock, cfg);
}

#[test]
fn trajectory_file_counts_states() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::A, dir.path());
    cfg.k = 40;
    cfg.n_test = 2;
    cfg.sampler = SamplerConfig::ddim(10);
    let t = cmd_train(&cfg).unwrap();
    let s = cmd_sample(&cfg, &t.checkpoint, None, true).unwrap();
    assert_eq!(s.trajectory_rows, 2 * 40 * 11);
    let text = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 40 * 11);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("79,0,"), "{last}");
}

#[test]
fn single_deterministic_draw() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::A, dir.path());
    cfg.k = 1;
    let t = cmd_train(&cfg).unwrap();
    cmd_sample(&cfg, &t.checkpoint, None, false).unwrap();
    let a = fs::read_to_string(dir.path().join("ensembles.csv")).unwrap();
    cmd_sample(&cfg, &t.checkpoint, None, false).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("ensembles.csv")).unwrap());
    // std is undefined for one sample
    assert!(a.lines().nth(1).unwrap().split(',').nth(3).unwrap().is_empty());
}

#[test]
fn vision_only_checkpoint_ignores_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::D, dir.path());
    cfg.vision_only = true;
    let t = cmd_train(&cfg).unwrap();
    let rows = data::train_rows(&ExperimentConfig { vision_only: false, ..cfg.clone() }).unwrap();
    assert!(!rows[0].attributes.is_empty());
    let input = dir.path().join("with_attrs.jsonl");
    fs::write(&input, data::to_jsonl(&rows[..4])).unwrap();
    let s = cmd_sample(&cfg, &t.checkpoint, Some(&input), false).unwrap();
    assert_eq!(s.rows, 4);

    // the reverse direction is a dimension error
    let with = tiny(TaskName::D, &dir.path().join("attr"));
    let t2 = cmd_train(&with).unwrap();
    let stripped: Vec<_> = rows[..2]
        .iter()
        .cloned()
        .map(|mut r| {
            r.attributes.clear();
            r
        })
        .collect();
    fs::write(&input, data::to_jsonl(&stripped)).unwrap();
    let err = cmd_sample(&with, &t2.checkpoint, Some(&input), false).unwrap_err();
    assert_eq!(err.kind(), "DimensionMismatch");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(TaskName::A, dir.path());
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"format_version\": 1}").unwrap();
    assert_eq!(cmd_sample(&cfg, &bad, None, false).unwrap_err().kind(), "CheckpointCorrupt");
}

fn write_samples(path: &Path, sets: &[Vec<f64>]) {
    let mut s = String::from("id,k,y\n");
    for (i, set) in sets.iter().enumerate() {
        for (k, y) in set.iter().enumerate() {
            s += &format!("{i},{k},{y}\n");
        }
    }
    fs::write(path, s).unwrap();
}

#[test]
fn perfect_ensembles_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(TaskName::C, dir.path());
    let rows = data::test_rows(&cfg).unwrap();
    let samples = dir.path().join("perfect.csv");
    write_samples(&samples, &rows.iter().map(|r| vec![r.y.unwrap(); 5]).collect::<Vec<_>>());
    let r = cmd_eval(&cfg, &EvalSource::Predictions { samples, truth: None }).unwrap();
    assert_eq!(r.schema_version, 1);
    assert_eq!(r.metrics.mae, 0.0);
    assert_eq!(r.metrics.crps, Some(0.0));
    assert_eq!(r.metrics.r2, 1.0);
    let per_item = fs::read_to_string(dir.path().join("per_item.csv")).unwrap();
    assert_eq!(per_item.lines().count(), rows.len() + 1);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
}

#[test]
fn empty_predictions_mismatch_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(TaskName::C, dir.path());
    let samples = dir.path().join("empty.csv");
    fs::write(&samples, "id,k,y\n").unwrap();
    let err = cmd_eval(&cfg, &EvalSource::Predictions { samples, truth: None }).unwrap_err();
    assert_eq!(err.kind(), "LengthMismatch");
}

#[test]
fn oracle_ensembles_match_closed_form_crps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::A, dir.path());
    cfg.n_test = 300;
    let rows = data::test_rows(&cfg).unwrap();
    let spec = make_task(TaskName::A);
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut sets = Vec::new();
    let mut analytic = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let mix = spec.oracle_posterior(&r.context()).unwrap();
        let m = AnalyticGmm {
            mixture: &mix,
            schedule: &sched,
        };
        sets.push(sample_ensemble(&m, &SamplerConfig::ddim(50), &sched, RandomStream::new(4, i as u64), 40).unwrap());
        analytic += gaussian_crps(mix.means[0], mix.stds[0], r.y.unwrap());
    }
    analytic /= rows.len() as f64;
    let samples = dir.path().join("oracle.csv");
    write_samples(&samples, &sets);
    let r = cmd_eval(&cfg, &EvalSource::Predictions { samples, truth: None }).unwrap();
    let crps = r.metrics.crps.unwrap();
    assert!((crps / analytic - 1.0).abs() < 0.1, "{crps} vs {analytic}");
}

#[test]
fn oracle_command_reports_soundness() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::B, dir.path());
    cfg.sampler = SamplerConfig::ddim(50);
    let good = cmd_oracle(&cfg, 10_000).unwrap();
    assert!(good.pass, "{good:?}");
    assert!(good.probes.iter().all(|p| p.modes.len() == 2 && p.modes.iter().all(|m| m.covered)));
    cfg.sampler = SamplerConfig::ddim(1);
    let rough = cmd_oracle(&cfg, 2_000).unwrap();
    assert!(!rough.pass);
    assert!(rough.probes.iter().all(|p| p.w1 > 0.05));
    assert!(dir.path().join("oracle.json").exists());
}

#[test]
fn paradigm_ablation_runs_inline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(TaskName::B, dir.path());
    cfg.arch = ArchKind::Mcsn;
    let rows = cmd_ablate(&cfg, Ablation::Paradigm, None, None).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["diffusion-ddim-tau10-eta0", "diffusion-ddpm-T1000", "mse-baseline"]);
    assert_eq!(rows[0].denoiser_calls * 100, rows[1].denoiser_calls);
    assert_eq!(rows[2].denoiser_calls, 1);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,mae,rmse,r2,crps,denoiser_calls\n"));
    assert!(dir.path().join("timing.csv").exists());
}

#[test]
fn csv_dataset_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let rows = diffreg::generate(&make_task(TaskName::D), 120, 5).unwrap().rows;
    let mut text = String::from("x1,x2,attr_group,target\n");
    for r in &rows {
        text += &format!("{},{},{},{}\n", r.features[0], r.features[1], r.attributes[0], r.y.unwrap());
    }
    let path = dir.path().join("data.csv");
    fs::write(&path, text).unwrap();
    let json = format!(
        r#"{{"dataset": {path:?}, "test_dataset": {path:?}, "columns": {{"target": "target"}},
            "k": 4, "train": {{"epochs": 2, "batch_size": 16, "eval_every": 0}}, "out": {:?}}}"#,
        dir.path().join("out")
    );
    let cfg = ExperimentConfig::from_json(&json).unwrap();
    assert_eq!(data::train_rows(&cfg).unwrap(), rows);
    let t = cmd_train(&cfg).unwrap();
    let s = cmd_sample(&cfg, &t.checkpoint, None, false).unwrap();
    assert_eq!(s.samples, 120 * 4);
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_diffreg"))
}

#[test]
fn binary_exit_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args(["--out", dir.path().to_str().unwrap(), "schedule-dump"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1001);

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"dataset": "/missing/rows.jsonl"}"#).unwrap();
    let out = Command::new(bin()).args(["--config", cfg.to_str().unwrap(), "train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "DatasetNotFound");
    assert!(err["message"].as_str().unwrap().contains("/missing/rows.jsonl"));

    let out = Command::new(bin()).args(["--task", "Q", "oracle"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "UnknownTask");
}

#[test]
fn binary_oracle_with_one_step_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args(["--task", "A", "--out", dir.path().to_str().unwrap(), "oracle", "--tau", "1", "--samples", "1000"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], false);
}
