//! Denoising score-matching training with AdamW, plus the direct-regression
//! MSE baseline that shares the same network.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::denoiser::{Architecture, Denoiser, Example, McsnConfig};
use crate::posterior::crps_empirical;
use crate::rng::{normal, RandomStream};
use crate::sampler::{sample_ensemble, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::synth::Row;
use crate::types::{ConditioningContext, Normalizer};

/// Fixed `(y_t, t)` at which the MSE baseline evaluates the network, turning
/// the noise predictor into a plain context-to-target regressor.
pub const BASELINE_Y_T: f64 = 0.0;
pub const BASELINE_T: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub schedule: ScheduleSpec,
    /// Network to train; `None` picks [`McsnConfig::small`] sized to the data.
    pub architecture: Option<Architecture>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Validation cadence in epochs; 0 disables validation and keeps the
    /// last parameters.
    pub eval_every: usize,
    /// Stop after this many evaluations without a new best validation CRPS.
    pub patience: Option<usize>,
    /// Trailing fraction of rows held out for validation.
    pub val_fraction: f64,
    /// At most this many held-out rows are scored per evaluation.
    pub val_max_rows: usize,
    pub val_k: usize,
    pub val_sampler: SamplerConfig,
    /// Snapshot cadence in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the parameters; when set,
    /// validation and checkpoints use the averaged parameters. Off by default.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 3e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            schedule: ScheduleSpec::default(),
            architecture: None,
            grad_clip: Some(10.0),
            eval_every: 5,
            patience: None,
            val_fraction: 0.1,
            val_max_rows: 128,
            val_k: 8,
            val_sampler: SamplerConfig::ddim(10),
            checkpoint_every: 0,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if matches!(self.ema_decay, Some(d) if !(0.0..1.0).contains(&d)) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.eval_every > 0 && self.val_k == 0 {
            return bad("val_k must be >= 1");
        }
        self.val_sampler.validate(self.schedule.steps)?;
        self.schedule.build().map(|_| ())
    }

    /// The configured architecture, or the default one for the data dims.
    pub fn resolve_architecture(&self, feature_dim: usize, attribute_dim: usize) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::Mcsn(McsnConfig::small(feature_dim, attribute_dim)))
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments. Weight decay is applied
/// to the parameters directly (`p -= lr * wd * p`), never through the
/// gradient. On a non-finite result nothing is modified.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            what: "optimizer state length",
            expected: n,
            got: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    let step = state.step + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;

    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for i in 0..n {
        let g = grads[i];
        let mi = b1 * state.m[i] + (1.0 - b1) * g;
        let vi = b2 * state.v[i] + (1.0 - b2) * g * g;
        let upd = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
        let pi = params[i] * decay - lr * upd;
        if !pi.is_finite() || !mi.is_finite() || !vi.is_finite() {
            return Err(Error::NonFiniteUpdate);
        }
        m.push(mi);
        v.push(vi);
        p.push(pi);
    }
    params.copy_from_slice(&p);
    state.m = m;
    state.v = v;
    state.step = step;
    Ok(())
}

/// The noise draw behind one score-matching example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsmRecord {
    pub t: usize,
    pub eps: f64,
    pub y_t: f64,
}

/// Draws `t ~ U{1..T}`, `eps ~ N(0, 1)` for each normalized target and
/// forms `y_t`.
pub fn dsm_draws(y0: &[f64], sched: &NoiseSchedule, stream: RandomStream) -> Result<Vec<DsmRecord>> {
    let mut rng = stream.rng();
    y0.iter()
        .map(|&y| {
            let t = rng.random_range(1..=sched.steps());
            let eps = normal(&mut rng);
            Ok(DsmRecord {
                t,
                eps,
                y_t: sched.perturb(y, t, eps)?,
            })
        })
        .collect()
}

/// Mean of `(eps - predict(y_t, t, ctx))^2` over the batch, with the draws
/// that produced it.
pub fn dsm_batch_loss<F>(
    mut predict: F,
    batch: &[(f64, &ConditioningContext)],
    sched: &NoiseSchedule,
    stream: RandomStream,
) -> Result<(f64, Vec<DsmRecord>)>
where
    F: FnMut(f64, usize, &ConditioningContext) -> Result<f64>,
{
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let y0: Vec<f64> = batch.iter().map(|b| b.0).collect();
    let recs = dsm_draws(&y0, sched, stream)?;
    let mut total = 0.0;
    for (r, (_, ctx)) in recs.iter().zip(batch) {
        let d = r.eps - predict(r.y_t, r.t, ctx)?;
        total += d * d;
    }
    Ok((total / batch.len() as f64, recs))
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Set on the last step of an epoch that ran validation.
    pub val_crps: Option<f64>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,val_crps\n");
    for c in curve {
        let v = c.val_crps.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", c.step, c.loss, v));
    }
    s
}

/// Exponential moving average, used to read trends off noisy
/// per-batch losses.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let a = match acc {
            None => v,
            Some(prev) => alpha * v + (1.0 - alpha) * prev,
        };
        acc = Some(a);
        out.push(a);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Intermediate checkpoints as `(epoch, checkpoint)`.
    pub snapshots: Vec<(usize, Checkpoint)>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

pub fn train_diffusion(rows: &[Row], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(rows, cfg, ModelKind::Diffusion)
}

/// Trains the same network as a direct regressor: prediction is
/// `f(BASELINE_Y_T, BASELINE_T, ctx)` and the loss is `(f - y0)^2`.
pub fn train_mse_baseline(rows: &[Row], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(rows, cfg, ModelKind::MseBaseline)
}

/// Baseline point prediction in normalized units.
pub fn baseline_predict(den: &Denoiser, params: &[f64], ctx: &ConditioningContext) -> Result<f64> {
    den.forward(params, BASELINE_Y_T, BASELINE_T, ctx)
}

/// Normalizer fitted on the targets; a constant target keeps unit scale.
fn fit_normalizer(y: &[f64]) -> Result<Normalizer> {
    match Normalizer::fit(y) {
        Err(Error::DegenerateVariance(_)) => Normalizer::new(y[0], 1.0),
        other => other,
    }
}

struct Data {
    ctx: Vec<ConditioningContext>,
    y: Vec<f64>,
}

fn split(rows: &[Row], cfg: &TrainConfig) -> Result<(Data, Data)> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ctx = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let v = r
            .y
            .ok_or_else(|| Error::InvalidConfig(format!("training row {i} has no target")))?;
        ctx.push(ConditioningContext::new(r.features.clone(), r.attributes.clone())?);
        y.push(v);
    }
    let n_val = if cfg.eval_every > 0 && cfg.val_fraction > 0.0 {
        ((rows.len() as f64 * cfg.val_fraction).round() as usize).max(1)
    } else {
        0
    };
    let n_train = rows.len() - n_val.min(rows.len());
    if n_train < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{n_train} training rows is fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    let val_ctx = ctx.split_off(n_train);
    let val_y = y.split_off(n_train);
    let keep = val_ctx.len().min(cfg.val_max_rows);
    Ok((
        Data { ctx, y },
        Data {
            ctx: val_ctx.into_iter().take(keep).collect(),
            y: val_y.into_iter().take(keep).collect(),
        },
    ))
}

fn clip_global_norm(g: &mut [f64], max: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Mean CRPS on held-out rows in normalized units. Uses the same streams on
/// every call so successive evaluations differ only through the parameters.
fn validation_crps(
    kind: ModelKind,
    den: &Denoiser,
    params: &[f64],
    val: &Data,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    stream: RandomStream,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, (ctx, &y)) in val.ctx.iter().zip(&val.y).enumerate() {
        total += match kind {
            ModelKind::Diffusion => {
                let prepared = den.prepare(params, ctx)?;
                let s = sample_ensemble(&prepared, &cfg.val_sampler, sched, stream.derive(i as u64), cfg.val_k)?;
                crps_empirical(&s, y)?
            }
            ModelKind::MseBaseline => (baseline_predict(den, params, ctx)? - y).abs(),
        };
    }
    Ok(total / val.y.len() as f64)
}

fn train(rows: &[Row], cfg: &TrainConfig, kind: ModelKind) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let (train, val) = split(rows, cfg)?;
    let norm = fit_normalizer(&train.y)?;
    let y0: Vec<f64> = train.y.iter().map(|&v| norm.normalize(v)).collect();
    let val = Data {
        y: val.y.iter().map(|&v| norm.normalize(v)).collect(),
        ctx: val.ctx,
    };

    let arch = cfg.resolve_architecture(train.ctx[0].feature_dim(), train.ctx[0].attribute_dim());
    let den = Denoiser::new(arch)?;
    let root = RandomStream::new(cfg.seed, 0x7a1e);
    let mut params = den.init_params(root.derive(0));
    let mut opt = OptimizerState::new(params.len());
    let mut ema = cfg.ema_decay.map(|_| params.clone());
    let cfg_hash = cfg.hash();
    let snapshot = |p: &[f64]| Checkpoint::new(kind, &den, cfg.schedule, norm, cfg_hash.clone(), p);

    let mut curve = Vec::new();
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..y0.len()).collect();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut examples = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut root.derive(1).derive(epoch as u64).rng());
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            examples.clear();
            match kind {
                ModelKind::Diffusion => {
                    let batch_y: Vec<f64> = chunk.iter().map(|&i| y0[i]).collect();
                    let recs = dsm_draws(&batch_y, &sched, root.derive(2).derive(step as u64))?;
                    examples.extend(chunk.iter().zip(recs).map(|(&i, r)| Example {
                        y_t: r.y_t,
                        t: r.t,
                        ctx: &train.ctx[i],
                        target: r.eps,
                    }));
                }
                ModelKind::MseBaseline => examples.extend(chunk.iter().map(|&i| Example {
                    y_t: BASELINE_Y_T,
                    t: BASELINE_T,
                    ctx: &train.ctx[i],
                    target: y0[i],
                })),
            }
            let (loss, mut grad) = match den.loss_and_grad(&params, &examples) {
                Ok((l, g)) if l.is_finite() => (l, g),
                Ok((l, _)) => return Err(Error::DivergedTraining { step, loss: l }),
                Err(Error::NonFiniteGradient | Error::NonFiniteActivation(_)) => {
                    return Err(Error::DivergedTraining { step, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grad, c);
            }
            adamw_step(&mut params, &grad, &mut opt, cfg)?;
            if let (Some(avg), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
                for (a, p) in avg.iter_mut().zip(&params) {
                    *a = d * *a + (1.0 - d) * p;
                }
            }
            curve.push(CurvePoint {
                step,
                epoch,
                loss,
                val_crps: None,
            });
        }

        let current = ema.as_deref().unwrap_or(&params);
        if cfg.eval_every > 0 && !val.y.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let crps = validation_crps(kind, &den, current, &val, &sched, cfg, root.derive(3))?;
            if let Some(last) = curve.last_mut() {
                last.val_crps = Some(crps);
            }
            if best.as_ref().is_none_or(|b| crps < b.0) {
                best = Some((crps, epoch, current.to_vec()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push((epoch, snapshot(current)?));
        }
        if matches!(cfg.patience, Some(p) if since_best > p) {
            break;
        }
    }

    let last_epoch = curve.last().map_or(0, |c| c.epoch);
    let (best_epoch, final_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (last_epoch, ema.unwrap_or(params)),
    };
    Ok(TrainOutcome {
        checkpoint: snapshot(&final_params)?,
        curve,
        snapshots,
        best_epoch,
    })
}
