//! Experiment commands. Each is a pure function of its inputs, config and
//! seed; primary outputs are written with a fixed row order and no
//! timestamps, so reruns are byte-identical. Wall-clock time only goes to
//! `timing.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffreg::checkpoint::ModelKind;
use diffreg::posterior::{reliability_report, ReliabilityReport};
use diffreg::sampler::{sample_ensemble, write_trajectory_rows, AnalyticGmm, TRAJECTORY_HEADER};
use diffreg::synth::{mode_coverage, ModeHit};
use diffreg::trainer::{curve_csv, train_diffusion, train_mse_baseline, TrainOutcome};
use diffreg::{
    crps_empirical, make_task, summarize, wasserstein1, ConditioningContext, MetricsReport, PosteriorEnsemble,
    RandomStream, Row, SamplerConfig, TaskName,
};
use serde::{Deserialize, Serialize};

use crate::config::{ArchKind, ExperimentConfig};
use crate::data;
use crate::error::{CliError, Result};
use crate::model::{Model, Prediction};

pub const SCHEMA_VERSION: u32 = 1;

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn write_lock(cfg: &ExperimentConfig) -> Result<()> {
    data::write(&out_path(cfg, "config.lock"), &cfg.lock())
}

/// Trains the configured model in memory.
pub fn train_model(cfg: &ExperimentConfig, kind: ArchKind) -> Result<TrainOutcome> {
    let rows = data::train_rows(cfg)?;
    let first = rows.first().ok_or(diffreg::Error::EmptyDataset)?;
    let mut train = cfg.train.clone();
    train.architecture = Some(ExperimentConfig { arch: kind, ..cfg.clone() }.architecture(first.features.len(), first.attributes.len()));
    let mut outcome = match kind {
        ArchKind::MseBaseline => train_mse_baseline(&rows, &train)?,
        ArchKind::Mlp | ArchKind::Mcsn => train_diffusion(&rows, &train)?,
    };
    let hash = cfg.hash();
    outcome.checkpoint.config_hash = hash.clone();
    for (_, ck) in &mut outcome.snapshots {
        ck.config_hash = hash.clone();
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Writes `checkpoint.json`, `loss.csv`, per-epoch snapshots and
/// `config.lock` under the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let outcome = train_model(cfg, cfg.arch)?;
    let path = out_path(cfg, "checkpoint.json");
    data::write(&path, &outcome.checkpoint.to_json())?;
    data::write(&out_path(cfg, "loss.csv"), &curve_csv(&outcome.curve))?;
    for (epoch, ck) in &outcome.snapshots {
        data::write(&out_path(cfg, &format!("checkpoint_epoch{epoch}.json")), &ck.to_json())?;
    }
    write_lock(cfg)?;
    Ok(TrainSummary {
        checkpoint: path,
        digest: outcome.checkpoint.digest(),
        steps: outcome.curve.len(),
        first_loss: outcome.curve.first().map_or(f64::NAN, |c| c.loss),
        last_loss: outcome.curve.last().map_or(f64::NAN, |c| c.loss),
    })
}

pub fn ensembles(cfg: &ExperimentConfig, preds: &[Prediction]) -> Result<Vec<PosteriorEnsemble>> {
    preds
        .iter()
        .map(|p| {
            let e = summarize(p.samples.clone())?;
            Ok(if cfg.clip {
                let [lo, hi] = cfg.clip_bounds();
                e.with_clip(lo, hi)
            } else {
                e
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ensembles_csv(cfg: &ExperimentConfig, rows: &[Row], ens: &[PosteriorEnsemble]) -> String {
    let mut s = String::from("id,y_true,mean,std,clipped_mean,oob_rate\n");
    for (i, (r, e)) in rows.iter().zip(ens).enumerate() {
        let [lo, hi] = cfg.clip_bounds();
        let oob = e.out_of_bounds_rate(lo, hi);
        let _ = writeln!(s, "{i},{},{},{},{},{oob}", opt(r.y), e.mean, opt(e.std), opt(e.clipped_mean));
    }
    s
}

pub fn samples_csv(preds: &[Prediction]) -> String {
    let mut s = String::from("id,k,y\n");
    for (i, p) in preds.iter().enumerate() {
        for (k, y) in p.samples.iter().enumerate() {
            let _ = writeln!(s, "{i},{k},{y}");
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub rows: usize,
    pub samples: usize,
    pub trajectory_rows: usize,
}

/// Samples `cfg.k` draws for each input row (the configured test rows when
/// `input` is `None`). Writes `ensembles.csv`, `samples.csv` and, when
/// requested, `trajectories.csv` with `trajectory_id = row * K + k`.
pub fn cmd_sample(cfg: &ExperimentConfig, checkpoint: &Path, input: Option<&Path>, trajectories: bool) -> Result<SampleSummary> {
    let model = Model::load(checkpoint)?;
    let rows = match input {
        Some(p) => data::load_rows(p, &cfg.columns)?,
        None => data::test_rows(cfg)?,
    };
    let preds = model.predict_rows(&rows, &cfg.sampler, cfg.k, cfg.seed, trajectories)?;
    let ens = ensembles(cfg, &preds)?;
    data::write(&out_path(cfg, "ensembles.csv"), &ensembles_csv(cfg, &rows, &ens))?;
    data::write(&out_path(cfg, "samples.csv"), &samples_csv(&preds))?;
    let mut trajectory_rows = 0;
    if trajectories {
        let mut s = String::from(TRAJECTORY_HEADER);
        let norm = model.checkpoint.normalizer;
        for (i, p) in preds.iter().enumerate() {
            for (k, traj) in p.trajectories.iter().enumerate() {
                trajectory_rows += traj.states.len();
                write_trajectory_rows(&mut s, i * p.trajectories.len() + k, traj, &norm);
            }
        }
        data::write(&out_path(cfg, "trajectories.csv"), &s)?;
    }
    write_lock(cfg)?;
    Ok(SampleSummary {
        rows: rows.len(),
        samples: preds.iter().map(|p| p.samples.len()).sum(),
        trajectory_rows,
    })
}

/// Parses `samples.csv` back into per-row sample lists (ids must be
/// contiguous from 0).
pub fn parse_samples_csv(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| CliError::DatasetParse {
        path: path.to_path_buf(),
        message: m,
    };
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let id: usize = field(0).parse().map_err(|_| bad(format!("row {}: bad id", line + 1)))?;
        let y: f64 = field(2).parse().map_err(|_| bad(format!("row {}: bad sample", line + 1)))?;
        if id == out.len() {
            out.push(Vec::new());
        } else if id + 1 != out.len() {
            return Err(bad(format!("row {}: id {id} out of order", line + 1)));
        }
        out[id].push(y);
    }
    Ok(out)
}

/// Where `cmd_eval` gets its ensembles.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// A `samples.csv` file; ground truth from `truth` or the configured test rows.
    Predictions { samples: PathBuf, truth: Option<PathBuf> },
    /// Sample the configured test rows from a checkpoint.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metrics: MetricsReport,
    pub reliability: ReliabilityReport,
}

fn truths(rows: &[Row]) -> Result<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            r.y.ok_or_else(|| {
                CliError::ConfigParse(format!("evaluation row {i} has no ground truth"))
            })
        })
        .collect()
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).floor() as usize]
}

/// Metrics, reliability summary and per-item CSV for finished ensembles.
pub fn evaluate_ensembles(cfg: &ExperimentConfig, ens: &[PosteriorEnsemble], y: &[f64]) -> Result<(EvalReport, String)> {
    let metrics = diffreg::posterior::evaluate(ens, y)?;
    let threshold = quantile(ens.iter().map(PosteriorEnsemble::spread).collect(), cfg.flag_quantile);
    let reliability = reliability_report(ens, y, threshold)?;
    let [lo, hi] = cfg.clip_bounds();
    let mut csv = String::from("id,y_true,mean,std,crps,oob_rate,flagged\n");
    for (i, (e, &t)) in ens.iter().zip(y).enumerate() {
        let _ = writeln!(
            csv,
            "{i},{t},{},{},{},{},{}",
            e.reported_mean(),
            opt(e.std),
            crps_empirical(&e.samples, t)?,
            e.out_of_bounds_rate(lo, hi),
            reliability.is_flagged(i)
        );
    }
    Ok((
        EvalReport {
            schema_version: SCHEMA_VERSION,
            metrics,
            reliability,
        },
        csv,
    ))
}

/// Writes `metrics.json` and `per_item.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, source: &EvalSource) -> Result<EvalReport> {
    let (ens, y) = match source {
        EvalSource::Predictions { samples, truth } => {
            let sets = parse_samples_csv(samples, &data::read(samples)?)?;
            let rows = match truth {
                Some(p) => data::load_rows(p, &cfg.columns)?,
                None => data::test_rows(cfg)?,
            };
            if sets.len() != rows.len() || sets.is_empty() {
                return Err(diffreg::Error::LengthMismatch {
                    left: sets.len(),
                    right: rows.len(),
                }
                .into());
            }
            let preds: Vec<Prediction> = sets
                .into_iter()
                .map(|samples| Prediction {
                    samples,
                    trajectories: Vec::new(),
                    denoiser_calls: 0,
                })
                .collect();
            (ensembles(cfg, &preds)?, truths(&rows)?)
        }
        EvalSource::Checkpoint(path) => {
            let model = Model::load(path)?;
            let rows = data::test_rows(cfg)?;
            let preds = model.predict_rows(&rows, &cfg.sampler, cfg.k, cfg.seed, false)?;
            (ensembles(cfg, &preds)?, truths(&rows)?)
        }
    };
    let (report, csv) = evaluate_ensembles(cfg, &ens, &y)?;
    data::write(
        &out_path(cfg, "metrics.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    data::write(&out_path(cfg, "per_item.csv"), &csv)?;
    write_lock(cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Diffusion model against the identically encoded MSE regressor.
    Paradigm,
    /// DDPM over every step against few-step DDIM.
    Sampler,
    /// DDIM step count sweep.
    Steps,
    /// Ensemble size sweep.
    Ensemble,
}

pub const STEP_SWEEP: [usize; 6] = [1, 2, 5, 10, 50, 200];
pub const ENSEMBLE_SWEEP: [usize; 5] = [5, 10, 20, 40, 80];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricsReport,
    /// Denoiser evaluations per test row.
    pub denoiser_calls: usize,
    pub seconds: f64,
}

/// Metrics of one model/sampler/K variant on `rows`.
pub fn run_variant(
    cfg: &ExperimentConfig,
    name: String,
    model: &Model,
    rows: &[Row],
    sampler: &SamplerConfig,
    k: usize,
) -> Result<AblationRow> {
    let start = Instant::now();
    let preds = model.predict_rows(rows, sampler, k, cfg.seed, false)?;
    let seconds = start.elapsed().as_secs_f64();
    let ens = ensembles(cfg, &preds)?;
    Ok(AblationRow {
        variant: name,
        metrics: diffreg::posterior::evaluate(&ens, &truths(rows)?)?,
        denoiser_calls: preds.first().map_or(0, |p| p.denoiser_calls),
        seconds,
    })
}

fn load_or_train(cfg: &ExperimentConfig, path: Option<&Path>, baseline: bool) -> Result<Model> {
    match path {
        Some(p) => Model::load(p),
        None => {
            let kind = match (baseline, cfg.arch) {
                (true, _) => ArchKind::MseBaseline,
                (false, ArchKind::MseBaseline) => ArchKind::Mcsn,
                (false, k) => k,
            };
            Model::new(train_model(cfg, kind)?.checkpoint)
        }
    }
}

fn label(s: &SamplerConfig, steps: usize) -> String {
    match s.kind {
        diffreg::SamplerKind::Ddpm => format!("ddpm-T{steps}"),
        diffreg::SamplerKind::Ddim => format!("ddim-tau{}-eta{}", s.tau, s.eta),
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mae,rmse,r2,crps,denoiser_calls\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, m.mae, m.rmse, m.r2, opt(m.crps), r.denoiser_calls);
    }
    s
}

/// Runs one ablation on the test rows. Models come from the given
/// checkpoints or are trained inline. Writes `ablation.csv` (deterministic)
/// and `timing.csv` (wall clock).
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    which: Ablation,
    checkpoint: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let rows = data::test_rows(cfg)?;
    let model = load_or_train(cfg, checkpoint, false)?;
    let steps = model.schedule().steps();
    let mut out = Vec::new();
    match which {
        Ablation::Paradigm => {
            for s in [cfg.sampler, SamplerConfig::ddpm()] {
                out.push(run_variant(cfg, format!("diffusion-{}", label(&s, steps)), &model, &rows, &s, cfg.k)?);
            }
            let base = load_or_train(cfg, baseline, true)?;
            if base.kind() != ModelKind::MseBaseline {
                return Err(CliError::ConfigParse("baseline checkpoint is not an MSE baseline".into()));
            }
            out.push(run_variant(cfg, "mse-baseline".into(), &base, &rows, &cfg.sampler, 1)?);
        }
        Ablation::Sampler => {
            let ddim = SamplerConfig { eta: 0.0, ..cfg.sampler };
            let ddim = if ddim.kind == diffreg::SamplerKind::Ddim { ddim } else { SamplerConfig::ddim(10) };
            for s in [SamplerConfig::ddpm(), ddim, SamplerConfig { eta: 1.0, ..ddim }] {
                out.push(run_variant(cfg, label(&s, steps), &model, &rows, &s, cfg.k)?);
            }
        }
        Ablation::Steps => {
            for tau in STEP_SWEEP {
                let s = SamplerConfig::ddim(tau);
                out.push(run_variant(cfg, label(&s, steps), &model, &rows, &s, cfg.k)?);
            }
        }
        Ablation::Ensemble => {
            for k in ENSEMBLE_SWEEP {
                out.push(run_variant(cfg, format!("k{k}"), &model, &rows, &cfg.sampler, k)?);
            }
        }
    }
    data::write(&out_path(cfg, "ablation.csv"), &ablation_csv(&out))?;
    let mut timing = String::from("variant,seconds\n");
    for r in &out {
        let _ = writeln!(timing, "{},{}", r.variant, r.seconds);
    }
    data::write(&out_path(cfg, "timing.csv"), &timing)?;
    write_lock(cfg)?;
    Ok(out)
}

/// Fixed probe contexts for sampler-soundness checks.
pub const ORACLE_PROBES: [([f64; 2], f64); 3] = [([-0.8, 0.4], 0.0), ([0.0, 0.0], 1.0), ([0.6, -0.9], 0.0)];
pub const ORACLE_W1: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleProbe {
    pub features: Vec<f64>,
    pub attributes: Vec<f64>,
    pub w1: f64,
    pub modes: Vec<ModeHit>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema_version: u32,
    pub task: TaskName,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    pub w1_threshold: f64,
    pub probes: Vec<OracleProbe>,
    pub pass: bool,
}

/// Drives the sampler with the exact mixture denoiser on a task and scores
/// the result against the true posterior. Never fails on a poor sampler:
/// the report just says so.
pub fn oracle_report(task: TaskName, sampler: &SamplerConfig, n: usize, seed: u64) -> Result<OracleReport> {
    let spec = make_task(task);
    let sched = diffreg::ScheduleSpec::default().build()?;
    let mut probes = Vec::new();
    for (i, (f, a)) in ORACLE_PROBES.iter().enumerate() {
        let ctx = ConditioningContext::new(f.to_vec(), vec![*a])?;
        let mix = spec.oracle_posterior(&ctx)?;
        let model = AnalyticGmm {
            mixture: &mix,
            schedule: &sched,
        };
        let samples = sample_ensemble(&model, sampler, &sched, RandomStream::new(seed, 0x0dac1e).derive(i as u64), n)?;
        let w1 = wasserstein1(&samples, &mix.quantile_grid(n))?;
        let radius = 3.0 * mix.stds.iter().cloned().fold(f64::INFINITY, f64::min);
        let modes = mode_coverage(&samples, &mix, radius)?;
        let pass = w1 < ORACLE_W1 && modes.iter().all(|m| m.covered);
        probes.push(OracleProbe {
            features: ctx.features,
            attributes: ctx.attributes,
            w1,
            modes,
            pass,
        });
    }
    Ok(OracleReport {
        schema_version: SCHEMA_VERSION,
        task,
        sampler: *sampler,
        n_samples: n,
        w1_threshold: ORACLE_W1,
        pass: probes.iter().all(|p| p.pass),
        probes,
    })
}

/// Writes `oracle.json` for the configured task and sampler.
pub fn cmd_oracle(cfg: &ExperimentConfig, n: usize) -> Result<OracleReport> {
    let task = cfg
        .task
        .ok_or_else(|| CliError::ConfigParse("oracle needs a synthetic task".into()))?;
    let report = oracle_report(task, &cfg.sampler, n, cfg.seed)?;
    data::write(
        &out_path(cfg, "oracle.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    write_lock(cfg)?;
    Ok(report)
}

/// Writes `schedule.csv` (`t,beta,alpha_bar,snr`).
pub fn cmd_schedule_dump(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = out_path(cfg, "schedule.csv");
    data::write(&path, &cfg.train.schedule.build()?.to_csv())?;
    Ok(path)
}
