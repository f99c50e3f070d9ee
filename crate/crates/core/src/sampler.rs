//! Reverse-process solvers: ancestral DDPM and DDIM (deterministic at
//! `eta = 0`), driven by any noise predictor bound to a context.

use std::cell::Cell;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::nn::denoiser::Prepared;
use crate::rng::{normal, RandomStream};
use crate::schedule::NoiseSchedule;
use crate::types::Normalizer;

/// A noise predictor with its conditioning already applied.
pub trait EpsModel {
    fn eps(&self, y_t: f64, t: usize) -> Result<f64>;
}

impl EpsModel for Prepared<'_> {
    fn eps(&self, y_t: f64, t: usize) -> Result<f64> {
        Prepared::eps(self, y_t, t)
    }
}

/// Exact noise prediction for a Gaussian-mixture target, obtained from the
/// closed-form score of the diffused mixture.
pub struct AnalyticGmm<'a> {
    pub mixture: &'a GaussianMixture,
    pub schedule: &'a NoiseSchedule,
}

impl EpsModel for AnalyticGmm<'_> {
    fn eps(&self, y_t: f64, t: usize) -> Result<f64> {
        analytic_gmm_denoiser(self.mixture, t, y_t, self.schedule)
    }
}

/// `eps_hat = -sqrt(1 - ab_t) * score_t(y_t)` for a Gaussian-mixture target.
pub fn analytic_gmm_denoiser(mixture: &GaussianMixture, t: usize, y_t: f64, sched: &NoiseSchedule) -> Result<f64> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    let ab = sched.alpha_bar(t)?;
    Ok(-(1.0 - ab).sqrt() * mixture.diffused_score(y_t, ab))
}

/// Counts calls into the wrapped model.
pub struct Counting<M> {
    pub inner: M,
    calls: Cell<usize>,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: EpsModel> EpsModel for Counting<M> {
    fn eps(&self, y_t: f64, t: usize) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eps(y_t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Variance of the ancestral DDPM update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdpmVariance {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t)`.
    PosteriorTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM stochasticity; ignored by DDPM.
    pub eta: f64,
    /// Number of DDIM transitions; DDPM always visits every step.
    pub tau: usize,
    pub ddpm_variance: DdpmVariance,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            eta: 0.0,
            tau: 10,
            ddpm_variance: DdpmVariance::Beta,
        }
    }
}

impl SamplerConfig {
    pub fn ddim(tau: usize) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn ddpm() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            ..Self::default()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.kind == SamplerKind::Ddim && (self.tau == 0 || self.tau > steps) {
            return Err(Error::InvalidConfig(format!("tau {} outside 1..={steps}", self.tau)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!("eta {} must be >= 0", self.eta)));
        }
        Ok(())
    }

    /// Visited steps from `T` down to `0`, inclusive of both ends.
    pub fn step_sequence(&self, steps: usize) -> Vec<usize> {
        let tau = match self.kind {
            SamplerKind::Ddpm => steps,
            SamplerKind::Ddim => self.tau,
        };
        step_sequence(steps, tau)
    }

    /// Denoiser evaluations needed per trajectory.
    pub fn denoiser_calls(&self, steps: usize) -> usize {
        self.step_sequence(steps).len() - 1
    }
}

/// Uniform stride over `{0, ..., T}`: `round(T * i / tau)` for `i = tau..=0`.
pub fn step_sequence(steps: usize, tau: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = (0..=tau)
        .rev()
        .map(|i| ((steps * i) as f64 / tau as f64).round() as usize)
        .collect();
    seq.dedup();
    seq
}

/// Ancestral update `y_{t-1} = (y_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t) + sigma_t z`,
/// with `z` drawn only for `t > 1`.
pub fn ddpm_step(
    y_t: f64,
    t: usize,
    eps_hat: f64,
    sched: &NoiseSchedule,
    variance: DdpmVariance,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let mean = (y_t - beta / (1.0 - ab).sqrt() * eps_hat) / alpha.sqrt();
    if t == 1 {
        return Ok(mean);
    }
    let var = match variance {
        DdpmVariance::Beta => beta,
        DdpmVariance::PosteriorTilde => beta * (1.0 - sched.alpha_bar(t - 1)?) / (1.0 - ab),
    };
    Ok(mean + var.sqrt() * normal(rng))
}

/// Generalized DDIM update from `t` to `t_prev`; `ab_0 = 1`.
pub fn ddim_step(
    y_t: f64,
    t: usize,
    t_prev: usize,
    eps_hat: f64,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if t_prev >= t {
        return Err(Error::StepOutOfRange { t: t_prev, max: t.saturating_sub(1) });
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let y0_hat = (y_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt();
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut next = ab_prev.sqrt() * y0_hat + dir * eps_hat;
    if sigma > 0.0 {
        next += sigma * normal(rng);
    }
    Ok(next)
}

/// States `(t, y_t)` visited by one reverse pass, from `T` down to `0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(usize, f64)>,
}

impl Trajectory {
    pub fn terminal(&self) -> f64 {
        self.states.last().map_or(f64::NAN, |s| s.1)
    }

    pub fn initial(&self) -> f64 {
        self.states.first().map_or(f64::NAN, |s| s.1)
    }
}

/// Runs one reverse trajectory. The initial state is the first normal draw
/// of `stream`; later draws (if any) continue the same stream.
pub fn sample_one<M: EpsModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream: RandomStream,
) -> Result<(f64, Trajectory)> {
    let mut traj = Trajectory::default();
    let y0 = run(model, cfg, sched, stream, Some(&mut traj))?;
    Ok((y0, traj))
}

/// Like [`sample_one`] without recording the path.
pub fn sample_terminal<M: EpsModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream: RandomStream,
) -> Result<f64> {
    run(model, cfg, sched, stream, None)
}

fn run<M: EpsModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream: RandomStream,
    mut traj: Option<&mut Trajectory>,
) -> Result<f64> {
    cfg.validate(sched.steps())?;
    let mut rng = stream.rng();
    let mut y = normal(&mut rng);
    let seq = cfg.step_sequence(sched.steps());
    if let Some(tr) = traj.as_deref_mut() {
        tr.states.reserve(seq.len());
        tr.states.push((seq[0], y));
    }
    for pair in seq.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps = model.eps(y, t)?;
        y = match cfg.kind {
            SamplerKind::Ddpm => ddpm_step(y, t, eps, sched, cfg.ddpm_variance, &mut rng)?,
            SamplerKind::Ddim => ddim_step(y, t, t_prev, eps, cfg.eta, sched, &mut rng)?,
        };
        if let Some(tr) = traj.as_deref_mut() {
            tr.states.push((t_prev, y));
        }
    }
    Ok(y)
}

/// Stream of trajectory `k` within an ensemble.
pub fn trajectory_stream(base: RandomStream, k: usize) -> RandomStream {
    base.derive(k as u64)
}

/// `k` terminal samples with per-trajectory derived streams.
pub fn sample_ensemble<M: EpsModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream: RandomStream,
    k: usize,
) -> Result<Vec<f64>> {
    (0..k)
        .map(|i| sample_terminal(model, cfg, sched, trajectory_stream(stream, i)))
        .collect()
}

/// Same output as [`sample_ensemble`], split over `threads` scoped workers.
pub fn sample_ensemble_parallel<M: EpsModel + Sync + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream: RandomStream,
    k: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    let threads = threads.clamp(1, k.max(1));
    let chunk = k.div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                s.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(k))
                        .map(|i| sample_terminal(model, cfg, sched, trajectory_stream(stream, i)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampler worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(k);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// CSV rows `trajectory_id,t,y_t_normalized,y_t_denormalized`.
pub fn write_trajectory_rows(out: &mut String, id: usize, traj: &Trajectory, norm: &Normalizer) {
    for &(t, y) in &traj.states {
        let _ = writeln!(out, "{id},{t},{y},{}", norm.denormalize(y));
    }
}

pub const TRAJECTORY_HEADER: &str = "trajectory_id,t,y_t_normalized,y_t_denormalized\n";

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    struct Fixed(f64);
    impl EpsModel for Fixed {
        fn eps(&self, _: f64, _: usize) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn step_sequences() {
        assert_eq!(step_sequence(1000, 10), vec![1000, 900, 800, 700, 600, 500, 400, 300, 200, 100, 0]);
        assert_eq!(step_sequence(1000, 1), vec![1000, 0]);
        assert_eq!(step_sequence(5, 5), vec![5, 4, 3, 2, 1, 0]);
        let s = step_sequence(1000, 7);
        assert_eq!((s[0], *s.last().unwrap(), s.len()), (1000, 0, 8));
        assert_eq!(SamplerConfig::ddpm().denoiser_calls(1000), 1000);
        assert_eq!(SamplerConfig::ddim(10).denoiser_calls(1000), 10);
    }

    #[test]
    fn ddpm_last_step_inverts_perturb() {
        let s = sched();
        let (y0, eps) = (0.8, -1.3);
        let y1 = s.perturb(y0, 1, eps).unwrap();
        let mut rng = RandomStream::new(0, 0).rng();
        let back = ddpm_step(y1, 1, eps, &s, DdpmVariance::Beta, &mut rng).unwrap();
        assert!((back - y0).abs() < 1e-12);
    }

    #[test]
    fn ddpm_zero_noise_branch() {
        let s = sched();
        let mut rng = RandomStream::new(0, 0).rng();
        // t = 1 draws no noise, so eps = 0 leaves a pure rescale
        let y = ddpm_step(0.9, 1, 0.0, &s, DdpmVariance::Beta, &mut rng).unwrap();
        assert_eq!(y, 0.9 / s.alpha(1).unwrap().sqrt());
        assert!(ddpm_step(0.9, 0, 0.0, &s, DdpmVariance::Beta, &mut rng).is_err());
    }

    #[test]
    fn ddim_single_step_is_exact() {
        let s = sched();
        let (y0, eps) = (-0.4, 0.7);
        let yt = s.perturb(y0, 1000, eps).unwrap();
        let mut rng = RandomStream::new(0, 0).rng();
        let back = ddim_step(yt, 1000, 0, eps, 0.0, &s, &mut rng).unwrap();
        assert!((back - y0).abs() < 1e-9);
        let again = ddim_step(yt, 1000, 0, eps, 0.0, &s, &mut rng).unwrap();
        assert_eq!(back, again);
        assert!(ddim_step(yt, 10, 10, eps, 0.0, &s, &mut rng).is_err());
    }

    #[test]
    fn ddim_on_unit_gaussian_follows_the_angle_product() {
        // With eps_hat = sqrt(1 - ab) y the update multiplies y by
        // cos(theta_t - theta_prev) where cos(theta) = sqrt(ab).
        let s = sched();
        let unit = GaussianMixture::gaussian(0.0, 1.0).unwrap();
        let model = AnalyticGmm { mixture: &unit, schedule: &s };
        for tau in [10, 50, 1000] {
            let cfg = SamplerConfig::ddim(tau);
            let (y0, traj) = sample_one(&model, &cfg, &s, RandomStream::new(9, 1)).unwrap();
            let theta = |t: usize| s.alpha_bar(t).unwrap().sqrt().acos();
            let factor: f64 = cfg
                .step_sequence(1000)
                .windows(2)
                .map(|w| (theta(w[0]) - theta(w[1])).cos())
                .product();
            assert!((y0 - traj.initial() * factor).abs() < 1e-12);
            if tau == 1000 {
                assert!(((y0 - traj.initial()) / traj.initial()).abs() < 2e-3);
            }
        }
    }

    #[test]
    fn trajectory_shape_and_determinism() {
        let s = sched();
        let cfg = SamplerConfig::ddim(10);
        let m = Counting::new(Fixed(0.1));
        let (y, a) = sample_one(&m, &cfg, &s, RandomStream::new(1, 2)).unwrap();
        assert_eq!(m.calls(), 10);
        assert_eq!(a.states.len(), 11);
        assert_eq!(a.states[0].0, 1000);
        assert_eq!(a.states[10], (0, y));
        assert!(a.states.windows(2).all(|w| w[0].0 > w[1].0));
        let (_, b) = sample_one(&m, &cfg, &s, RandomStream::new(1, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.initial(), RandomStream::new(1, 2).gaussian_draw(1)[0]);
    }

    #[test]
    fn analytic_denoiser_cases() {
        let s = sched();
        let unit = GaussianMixture::gaussian(0.0, 1.0).unwrap();
        let ab = s.alpha_bar(200).unwrap();
        let e = analytic_gmm_denoiser(&unit, 200, 0.9, &s).unwrap();
        assert!((e - 0.9 * (1.0 - ab).sqrt()).abs() < 1e-12);
        let sym = GaussianMixture::new(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.3, 0.3]).unwrap();
        assert!(analytic_gmm_denoiser(&sym, 500, 0.0, &s).unwrap().abs() < 1e-15);
        assert!(analytic_gmm_denoiser(&sym, 0, 0.0, &s).is_err());
    }

    #[test]
    fn parallel_matches_sequential() {
        let s = sched();
        let mix = GaussianMixture::new(vec![0.4, 0.6], vec![-1.0, 1.5], vec![0.3, 0.2]).unwrap();
        let model = AnalyticGmm { mixture: &mix, schedule: &s };
        let cfg = SamplerConfig {
            eta: 0.5,
            ..SamplerConfig::ddim(20)
        };
        let base = RandomStream::new(4, 4);
        let seq = sample_ensemble(&model, &cfg, &s, base, 37).unwrap();
        let par = sample_ensemble_parallel(&model, &cfg, &s, base, 37, 4).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn invalid_configs() {
        let s = sched();
        let m = Fixed(0.0);
        for cfg in [SamplerConfig::ddim(0), SamplerConfig::ddim(1001), SamplerConfig { eta: -1.0, ..SamplerConfig::ddim(5) }] {
            assert!(sample_terminal(&m, &cfg, &s, RandomStream::new(0, 0)).is_err());
        }
    }
}
