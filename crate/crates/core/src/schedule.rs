//! Discrete variance-preserving noise schedule.
//!
//! Step indices are 1-based: `t = 1..=T` index the noisy states and `t = 0`
//! denotes the clean sample, for which `alpha_bar(0) = 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            spec: ScheduleSpec {
                steps,
                beta_min,
                beta_max,
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    /// Cumulative product of alphas; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// Closed-form forward marginal `sqrt(ab) * y0 + sqrt(1 - ab) * eps`.
    pub fn perturb(&self, y0: f64, t: usize, eps: f64) -> Result<f64> {
        let ab = self.alpha_bar[self.index(t)?];
        Ok(ab.sqrt() * y0 + (1.0 - ab).sqrt() * eps)
    }

    /// Signal-to-noise ratio `ab / (1 - ab)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar[self.index(t)?];
        Ok(ab / (1.0 - ab))
    }

    /// CSV with columns `t,beta,alpha_bar,snr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,snr\n");
        for i in 0..self.steps() {
            let ab = self.alpha_bar[i];
            let _ = writeln!(out, "{},{},{},{}", i + 1, self.beta[i], ab, ab / (1.0 - ab));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    fn standard() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn endpoints() {
        let s = standard();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
        }
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.7);
    }

    #[test]
    fn terminal_alpha_bar() {
        // log-domain oracle: exp(sum log(1 - beta_t))
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let oracle = log_sum.exp();
        assert!((oracle - 4.035_829_765_375_694e-5).abs() < 1e-15, "oracle {oracle}");
        let ab = standard().alpha_bar(1000).unwrap();
        assert!(((ab - oracle) / oracle).abs() < 1e-10);
    }

    #[test]
    fn running_product_matches_log_domain() {
        let s = standard();
        let mut log_acc = 0.0;
        for t in 1..=1000 {
            log_acc += s.alpha(t).unwrap().ln();
            let ab = s.alpha_bar(t).unwrap();
            assert!((ab - log_acc.exp()).abs() <= 1e-10 * ab.max(1e-300).max(log_acc.exp()));
            if t > 1 {
                assert!(ab < s.alpha_bar(t - 1).unwrap());
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        let s = standard();
        assert_eq!(
            s.perturb(0.0, 0, 0.0),
            Err(Error::StepOutOfRange { t: 0, max: 1000 })
        );
        assert!(s.snr(1001).is_err());
    }

    #[test]
    fn perturb_branches() {
        let s = standard();
        for t in [1, 10, 500, 1000] {
            let ab = s.alpha_bar(t).unwrap();
            assert_eq!(s.perturb(1.7, t, 0.0).unwrap(), ab.sqrt() * 1.7);
            assert_eq!(s.perturb(0.0, t, 1.0).unwrap(), (1.0 - ab).sqrt());
        }
    }

    #[test]
    fn perturb_moments() {
        let s = standard();
        let t = 300;
        let y0 = 1.5;
        let ab = s.alpha_bar(t).unwrap();
        let eps = RandomStream::new(3, 0).gaussian_draw(100_000);
        let ys: Vec<f64> = eps.iter().map(|&e| s.perturb(y0, t, e).unwrap()).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        assert!(((mean - ab.sqrt() * y0) / (ab.sqrt() * y0)).abs() < 0.01);
        assert!(((var - (1.0 - ab)) / (1.0 - ab)).abs() < 0.01);
    }

    #[test]
    fn variance_preservation() {
        let s = standard();
        let y0 = RandomStream::new(4, 0).gaussian_draw(100_000);
        let eps = RandomStream::new(4, 1).gaussian_draw(100_000);
        for t in [1, 100, 500, 1000] {
            let ys: Vec<f64> = y0
                .iter()
                .zip(&eps)
                .map(|(&y, &e)| s.perturb(y, t, e).unwrap())
                .collect();
            let n = ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((std - 1.0).abs() < 0.01, "t={t} std={std}");
        }
    }

    #[test]
    fn snr_values() {
        let s = standard();
        assert!((s.snr(1).unwrap() - 9999.0).abs() < 1e-8);
        for t in 1..1000 {
            assert!(s.snr(t).unwrap() > s.snr(t + 1).unwrap());
        }
        // balance point: the step whose alpha_bar is nearest 0.5
        let half = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(half.snr(1).unwrap(), 1.0);
    }

    #[test]
    fn csv_dump() {
        let csv = NoiseSchedule::linear(3, 0.1, 0.3).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar,snr");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,0.1,0.9,"));
    }
}
