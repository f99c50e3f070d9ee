//! Sinusoidal time embedding.

use crate::error::{Error, Result};

/// Interleaved `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_k = 10000^(-k / (dim/2))`.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    out
}

/// Embedding of diffusion step `t` in `1..=steps`.
pub fn time_embed(t: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::OddDimension(dim));
    }
    if t == 0 || t > steps {
        return Err(Error::StepOutOfRange { t, max: steps });
    }
    Ok(sinusoidal(t as f64, dim))
}
