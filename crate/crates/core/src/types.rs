//! Target values, target normalization and conditioning contexts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar regression target in both physical and model units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub raw_value: f64,
    pub normalized_value: f64,
}

/// Affine map between physical target units and the zero-mean, unit-variance
/// space the diffusion model operates in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    center: f64,
    scale: f64,
}

impl Normalizer {
    pub fn new(center: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !center.is_finite() {
            return Err(Error::InvalidRange(format!(
                "normalizer needs finite center and positive scale, got ({center}, {scale})"
            )));
        }
        Ok(Self { center, scale })
    }

    /// The identity map.
    pub fn identity() -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
        }
    }

    /// Fits center and population standard deviation on `targets`.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("non-finite target".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 || targets.iter().all(|&v| v == targets[0]) {
            return Err(Error::DegenerateVariance("all targets are identical"));
        }
        Self::new(mean, var.sqrt())
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.center) / self.scale
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.center
    }

    pub fn target(&self, raw: f64) -> Target {
        Target {
            raw_value: raw,
            normalized_value: self.normalize(raw),
        }
    }
}

/// Visual feature vector together with an optional attribute vector.
///
/// An empty attribute vector selects vision-only conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningContext {
    pub features: Vec<f64>,
    #[serde(default)]
    pub attributes: Vec<f64>,
}

impl ConditioningContext {
    pub fn new(features: Vec<f64>, attributes: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "feature vector length",
                expected: 1,
                got: 0,
            });
        }
        if features.iter().chain(&attributes).any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("non-finite context entry".into()));
        }
        Ok(Self {
            features,
            attributes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.len()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.len()
    }

    /// Checks the context against the dimensions a network was built for.
    pub fn check_dims(&self, feature_dim: usize, attribute_dim: usize) -> Result<()> {
        if self.features.len() != feature_dim {
            return Err(Error::DimensionMismatch {
                what: "feature vector length",
                expected: feature_dim,
                got: self.features.len(),
            });
        }
        if self.attributes.len() != attribute_dim {
            return Err(Error::DimensionMismatch {
                what: "attribute vector length",
                expected: attribute_dim,
                got: self.attributes.len(),
            });
        }
        Ok(())
    }
}
