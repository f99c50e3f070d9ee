use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffreg::{SamplerKind, TaskName};
use diffreg_cli::commands::{self, Ablation, EvalSource};
use diffreg_cli::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "diffreg", version, about = "Diffusion-based scalar regression experiments")]
struct Cli {
    /// Experiment config (JSON); defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Synthetic task (A-D), overriding the config.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Seed for training and sampling, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write every reverse-trajectory state (sample only).
    #[arg(long, global = true)]
    trajectories: bool,
    /// Clamp reported means to the configured range.
    #[arg(long, global = true, overrides_with = "no_clip")]
    clip: bool,
    #[arg(long, global = true, overrides_with = "clip")]
    no_clip: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddim,
    Ddpm,
}

#[derive(Args, Default)]
struct SamplerFlags {
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// DDIM transitions.
    #[arg(long)]
    tau: Option<usize>,
    /// DDIM stochasticity.
    #[arg(long)]
    eta: Option<f64>,
    /// Ensemble size.
    #[arg(short, long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Paradigm,
    Sampler,
    Steps,
    Ensemble,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.json and loss.csv.
    Train,
    /// Draw K samples per row and write ensembles.csv and samples.csv.
    Sample {
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rows to sample (JSONL or CSV); defaults to the configured test rows.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Score predictions and write metrics.json and per_item.csv.
    Eval {
        /// samples.csv written by `sample`.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Ground-truth rows for --predictions; defaults to the configured test rows.
        #[arg(long, requires = "predictions")]
        truth: Option<PathBuf>,
        /// Sample the test rows from this checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Compare variants and write ablation.csv.
    Ablate {
        #[arg(value_enum)]
        which: AblationArg,
        /// Diffusion checkpoint; trained inline when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// MSE-baseline checkpoint for the paradigm ablation.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Check the sampler against the exact posterior of a synthetic task.
    Oracle {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Write the noise schedule as schedule.csv.
    ScheduleDump,
}

fn apply_sampler(cfg: &mut ExperimentConfig, f: &SamplerFlags) {
    if let Some(s) = f.sampler {
        cfg.sampler.kind = match s {
            SamplerArg::Ddim => SamplerKind::Ddim,
            SamplerArg::Ddpm => SamplerKind::Ddpm,
        };
    }
    if let Some(t) = f.tau {
        cfg.sampler.tau = t;
    }
    if let Some(e) = f.eta {
        cfg.sampler.eta = e;
    }
    if let Some(k) = f.k {
        cfg.k = k;
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = &cli.task {
        cfg.task = Some(t.parse::<TaskName>()?);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.clip {
        cfg.clip = true;
    }
    if cli.no_clip {
        cfg.clip = false;
    }
    let flags = match &cli.command {
        Command::Sample { sampler, .. }
        | Command::Eval { sampler, .. }
        | Command::Ablate { sampler, .. }
        | Command::Oracle { sampler, .. } => Some(sampler),
        Command::Train | Command::ScheduleDump => None,
    };
    if let Some(f) = flags {
        apply_sampler(&mut cfg, f);
    }
    // the schedule dump needs no data source
    if !matches!(cli.command, Command::ScheduleDump) {
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    let default_ck = || cfg.out.join("checkpoint.json");
    Ok(match &cli.command {
        Command::Train => {
            let s = commands::cmd_train(&cfg)?;
            serde_json::json!({
                "checkpoint": s.checkpoint, "sha256": s.digest, "steps": s.steps,
                "first_loss": s.first_loss, "last_loss": s.last_loss,
            })
        }
        Command::Sample { checkpoint, input, .. } => {
            let ck = checkpoint.clone().unwrap_or_else(default_ck);
            let s = commands::cmd_sample(&cfg, &ck, input.as_deref(), cli.trajectories)?;
            serde_json::json!({ "rows": s.rows, "samples": s.samples, "trajectory_rows": s.trajectory_rows })
        }
        Command::Eval {
            predictions,
            truth,
            checkpoint,
            ..
        } => {
            let source = match predictions {
                Some(p) => EvalSource::Predictions {
                    samples: p.clone(),
                    truth: truth.clone(),
                },
                None => EvalSource::Checkpoint(checkpoint.clone().unwrap_or_else(default_ck)),
            };
            json(&commands::cmd_eval(&cfg, &source)?.metrics)
        }
        Command::Ablate {
            which,
            checkpoint,
            baseline,
            ..
        } => {
            let which = match which {
                AblationArg::Paradigm => Ablation::Paradigm,
                AblationArg::Sampler => Ablation::Sampler,
                AblationArg::Steps => Ablation::Steps,
                AblationArg::Ensemble => Ablation::Ensemble,
            };
            let rows = commands::cmd_ablate(&cfg, which, checkpoint.as_deref(), baseline.as_deref())?;
            json(&rows)
        }
        Command::Oracle { samples, .. } => {
            let r = commands::cmd_oracle(&cfg, *samples)?;
            serde_json::json!({ "task": r.task, "pass": r.pass, "w1": r.probes.iter().map(|p| p.w1).collect::<Vec<_>>() })
        }
        Command::ScheduleDump => serde_json::json!({ "schedule": commands::cmd_schedule_dump(&cfg)? }),
    })
}

fn json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("output serializes")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
