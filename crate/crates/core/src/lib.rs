//! Conditional score-based diffusion for scalar generative regression.
//!
//! The crate learns the full conditional distribution `p(y | context)` of a
//! scalar target with a denoising score-matching objective, samples it with
//! DDPM or DDIM reverse solvers, and summarizes the resulting ensembles with
//! point metrics and CRPS. Synthetic tasks with closed-form posteriors make
//! every stage checkable against an exact oracle.

pub mod checkpoint;
pub mod error;
pub mod mixture;
pub mod nn;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use nn::denoiser::{eps_to_score, score_to_eps, Architecture, Denoiser, Example, Fusion, McsnConfig, MlpConfig};
pub use rng::RandomStream;
pub use schedule::{NoiseSchedule, ScheduleSpec};
pub use types::{ConditioningContext, Normalizer, Target};
pub use mixture::GaussianMixture;
pub use posterior::{crps_empirical, summarize, MetricsReport, PosteriorEnsemble};
pub use sampler::{EpsModel, SamplerConfig, SamplerKind, Trajectory};
pub use synth::{generate, make_task, wasserstein1, GmmTaskSpec, Row, SynthDataset, TaskName};
pub use checkpoint::{Checkpoint, ModelKind};
pub use trainer::{train_diffusion, train_mse_baseline, TrainConfig, TrainOutcome};
