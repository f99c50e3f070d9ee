//! A checkpoint bound to its network, ready to produce ensembles.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use diffreg::checkpoint::{Checkpoint, ModelKind};
use diffreg::sampler::{sample_one, trajectory_stream, SamplerConfig};
use diffreg::trainer::baseline_predict;
use diffreg::{ConditioningContext, Denoiser, NoiseSchedule, RandomStream, Row, Trajectory};

use crate::data;
use crate::error::Result;

/// Stream id of all sampling draws; rows and trajectories derive from it.
pub const SAMPLE_STREAM: u64 = 0x5a_3b1e;

pub struct Model {
    pub checkpoint: Checkpoint,
    den: Denoiser,
    params: Vec<f64>,
    sched: NoiseSchedule,
    warned: AtomicBool,
}

/// Samples for one row, in the checkpoint's target units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub samples: Vec<f64>,
    /// Normalized-space reverse paths, one per sample, when requested.
    pub trajectories: Vec<Trajectory>,
    pub denoiser_calls: usize,
}

impl Model {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let (den, params) = checkpoint.restore()?;
        let sched = checkpoint.schedule.build()?;
        Ok(Self {
            checkpoint,
            den,
            params,
            sched,
            warned: AtomicBool::new(false),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Checkpoint::from_json(&data::read(path)?)?)
    }

    pub fn kind(&self) -> ModelKind {
        self.checkpoint.kind
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn denoiser(&self) -> (&Denoiser, &[f64]) {
        (&self.den, &self.params)
    }

    /// Context for `row`. A vision-only network ignores attributes, with a
    /// single warning on stderr.
    pub fn context(&self, row: &Row) -> Result<ConditioningContext> {
        let arch = self.den.architecture();
        let mut attributes = row.attributes.clone();
        if arch.attribute_dim() == 0 && !attributes.is_empty() {
            if !self.warned.swap(true, Ordering::Relaxed) {
                eprintln!("warning: checkpoint has no attribute encoder; ignoring row attributes");
            }
            attributes.clear();
        }
        let ctx = ConditioningContext::new(row.features.clone(), attributes)?;
        ctx.check_dims(arch.feature_dim(), arch.attribute_dim())?;
        Ok(ctx)
    }

    /// `k` samples for one row. The MSE baseline always returns its single
    /// point prediction.
    pub fn predict(
        &self,
        row: &Row,
        sampler: &SamplerConfig,
        k: usize,
        stream: RandomStream,
        trajectories: bool,
    ) -> Result<Prediction> {
        let ctx = self.context(row)?;
        let norm = self.checkpoint.normalizer;
        match self.kind() {
            ModelKind::MseBaseline => Ok(Prediction {
                samples: vec![norm.denormalize(baseline_predict(&self.den, &self.params, &ctx)?)],
                trajectories: Vec::new(),
                denoiser_calls: 1,
            }),
            ModelKind::Diffusion => {
                let prepared = self.den.prepare(&self.params, &ctx)?;
                let mut samples = Vec::with_capacity(k);
                let mut paths = Vec::new();
                for i in 0..k {
                    let (y, traj) = sample_one(&prepared, sampler, &self.sched, trajectory_stream(stream, i))?;
                    samples.push(norm.denormalize(y));
                    if trajectories {
                        paths.push(traj);
                    }
                }
                Ok(Prediction {
                    samples,
                    trajectories: paths,
                    denoiser_calls: k * sampler.denoiser_calls(self.sched.steps()),
                })
            }
        }
    }

    /// Predictions for every row, row `i` on stream `derive(i)` of the
    /// sampling stream. Rows are split across threads; output order is the
    /// input order.
    pub fn predict_rows(
        &self,
        rows: &[Row],
        sampler: &SamplerConfig,
        k: usize,
        seed: u64,
        trajectories: bool,
    ) -> Result<Vec<Prediction>> {
        let base = RandomStream::new(seed, SAMPLE_STREAM);
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(rows.len().max(1));
        let chunk = rows.len().div_ceil(threads).max(1);
        let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
            let handles: Vec<_> = rows
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, row)| {
                                let i = c * chunk + j;
                                self.predict(row, sampler, k, base.derive(i as u64), trajectories)
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sampling worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(rows.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
