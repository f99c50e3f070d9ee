//! One-dimensional Gaussian mixtures with closed-form moments, CDF,
//! quantiles and the score of their VP-diffused marginals.

use serde::{Deserialize, Serialize};

use libm::erfc;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::DegenerateMixture("component lists must be nonempty and equally long".into()));
        }
        if stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::DegenerateMixture(format!("nonpositive component std in {stds:?}")));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::DegenerateMixture("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateMixture(format!("weights sum to {total}")));
        }
        Ok(Self { weights, means, stds })
    }

    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn std(&self) -> f64 {
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * (s * s + m * m))
            .sum();
        (second - self.mean().powi(2)).max(0.0).sqrt()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * normal_pdf((y - m) / s) / s).sum()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        if y == f64::INFINITY {
            return 1.0;
        }
        self.iter().map(|(w, m, s)| w * normal_cdf((y - m) / s)).sum()
    }

    /// Inverse CDF by bisection.
    pub fn quantile(&self, u: f64) -> f64 {
        let spread = self.stds.iter().cloned().fold(0.0, f64::max) * 12.0;
        let mut lo = self.means.iter().cloned().fold(f64::INFINITY, f64::min) - spread;
        let mut hi = self.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + spread;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `n` evenly spaced quantiles at `(i + 0.5) / n`, a low-variance
    /// stand-in for `n` exact draws.
    pub fn quantile_grid(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.quantile((i as f64 + 0.5) / n as f64)).collect()
    }

    /// Draws one value given a uniform `u` for the component and a normal `z`.
    pub fn draw(&self, u: f64, z: f64) -> f64 {
        let mut acc = 0.0;
        for (w, m, s) in self.iter() {
            acc += w;
            if u < acc {
                return m + s * z;
            }
        }
        let last = self.components() - 1;
        self.means[last] + self.stds[last] * z
    }

    fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, &m), &s)| (w, m, s))
    }

    /// Score `d/dy log p_t(y)` of the mixture after VP diffusion to a level
    /// with cumulative signal coefficient `alpha_bar`: each component becomes
    /// `N(sqrt(ab) m, ab s^2 + 1 - ab)`.
    pub fn diffused_score(&self, y: f64, alpha_bar: f64) -> f64 {
        let sa = alpha_bar.sqrt();
        // log-sum-exp over components for numerical stability
        let terms: Vec<(f64, f64)> = self
            .iter()
            .filter(|(w, _, _)| *w > 0.0)
            .map(|(w, m, s)| {
                let var = alpha_bar * s * s + 1.0 - alpha_bar;
                let d = y - sa * m;
                let log_resp = w.ln() - 0.5 * var.ln() - 0.5 * d * d / var;
                (log_resp, -d / var)
            })
            .collect();
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (lr, sc) in terms {
            let r = (lr - max).exp();
            num += r * sc;
            den += r;
        }
        num / den
    }
}
