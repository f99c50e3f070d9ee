//! Monte-Carlo posterior summaries, CRPS and point metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{normal_cdf, normal_pdf};

/// Summary of `K` terminal samples in reporting units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEnsemble {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation with `K - 1` denominator; `None` for `K = 1`.
    pub std: Option<f64>,
    /// Mean clamped to the reporting range, when one is set.
    pub clipped_mean: Option<f64>,
}

impl PosteriorEnsemble {
    /// Std, treating a single sample as zero spread.
    pub fn spread(&self) -> f64 {
        self.std.unwrap_or(0.0)
    }

    /// Mean that should be reported: the clipped one when clipping is on.
    pub fn reported_mean(&self) -> f64 {
        self.clipped_mean.unwrap_or(self.mean)
    }

    /// Clamps the reported mean to `[lo, hi]`; samples are left untouched.
    pub fn with_clip(mut self, lo: f64, hi: f64) -> Self {
        self.clipped_mean = Some(self.mean.clamp(lo, hi));
        self
    }

    /// Fraction of samples outside `[lo, hi]`.
    pub fn out_of_bounds_rate(&self, lo: f64, hi: f64) -> f64 {
        let n = self.samples.iter().filter(|&&v| v < lo || v > hi).count();
        n as f64 / self.samples.len() as f64
    }
}

pub fn summarize(samples: Vec<f64>) -> Result<PosteriorEnsemble> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let std = (samples.len() >= 2)
        .then(|| (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
    Ok(PosteriorEnsemble {
        samples,
        mean,
        std,
        clipped_mean: None,
    })
}

/// Empirical CRPS `(1/K) sum |x_i - y| - (1/(2K^2)) sum_ij |x_i - x_j|`.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let k = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_err: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / k;
    // sum_ij |x_i - x_j| = 2 sum_i i (K - i) (x_(i) - x_(i-1)); written over
    // gaps so that coincident samples contribute exactly zero
    let pair: f64 = sorted
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let i = (i + 1) as f64;
            i * (k - i) * (w[1] - w[0])
        })
        .sum::<f64>()
        * 2.0;
    Ok((abs_err - pair / (2.0 * k * k)).max(0.0))
}

/// CRPS of `N(mu, sigma^2)` at `y`.
pub fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crps: Option<f64>,
    pub n: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    Ok(preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    Ok((preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64).sqrt())
}

/// `1 - SS_res / SS_tot`; errors when every truth is identical.
pub fn r2(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    let n = truths.len() as f64;
    let mean = truths.iter().sum::<f64>() / n;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 || truths.len() < 2 {
        return Err(Error::DegenerateVariance("R2 undefined when all truths are equal"));
    }
    let ss_res: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn point_metrics(preds: &[f64], truths: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mae: mae(preds, truths)?,
        rmse: rmse(preds, truths)?,
        r2: r2(preds, truths)?,
        crps: None,
        n: preds.len(),
    })
}

/// Point metrics on reported means plus mean CRPS over the raw samples.
pub fn evaluate(ensembles: &[PosteriorEnsemble], truths: &[f64]) -> Result<MetricsReport> {
    check_lengths(ensembles.len(), truths.len())?;
    let preds: Vec<f64> = ensembles.iter().map(|e| e.reported_mean()).collect();
    let mut report = point_metrics(&preds, truths)?;
    let mut total = 0.0;
    for (e, &y) in ensembles.iter().zip(truths) {
        total += crps_empirical(&e.samples, y)?;
    }
    report.crps = Some(total / truths.len() as f64);
    Ok(report)
}

/// Average ranks (ties share their mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Spearman rank correlation; `None` when either side has no variation.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub threshold: f64,
    /// Indices of items whose spread exceeds the threshold.
    pub flagged: Vec<usize>,
    /// Spearman correlation between spread and absolute error of the mean.
    pub spread_error_correlation: Option<f64>,
    pub mae_flagged: Option<f64>,
    pub mae_unflagged: Option<f64>,
}

impl ReliabilityReport {
    pub fn is_flagged(&self, i: usize) -> bool {
        self.flagged.binary_search(&i).is_ok()
    }
}

pub fn reliability_report(ensembles: &[PosteriorEnsemble], truths: &[f64], threshold: f64) -> Result<ReliabilityReport> {
    check_lengths(ensembles.len(), truths.len())?;
    let spreads: Vec<f64> = ensembles.iter().map(PosteriorEnsemble::spread).collect();
    let errors: Vec<f64> = ensembles
        .iter()
        .zip(truths)
        .map(|(e, y)| (e.reported_mean() - y).abs())
        .collect();
    let flagged: Vec<usize> = (0..spreads.len()).filter(|&i| spreads[i] > threshold).collect();
    let mean_of = |pick: &dyn Fn(usize) -> bool| {
        let sel: Vec<f64> = (0..errors.len()).filter(|&i| pick(i)).map(|i| errors[i]).collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    };
    let is_flagged = |i: usize| spreads[i] > threshold;
    Ok(ReliabilityReport {
        threshold,
        mae_flagged: mean_of(&is_flagged),
        mae_unflagged: mean_of(&|i| !is_flagged(i)),
        flagged,
        spread_error_correlation: spearman(&spreads, &errors),
    })
}
