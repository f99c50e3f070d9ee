//! Multi-head scaled dot-product cross-attention from one query token onto a
//! small set of context tokens.

use super::{Init, Linear, ParamLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Concatenated per-head outputs, length `d_model`.
    pub mixed: Vec<f64>,
    /// Attention weights, `weights[h * m + j]` for head `h` and token `j`.
    pub weights: Vec<f64>,
}

fn check(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], n_heads: usize) -> Result<()> {
    let d = q.len();
    if keys.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "context token count",
            expected: 1,
            got: 0,
        });
    }
    if keys.len() != values.len() {
        return Err(Error::DimensionMismatch {
            what: "value token count",
            expected: keys.len(),
            got: values.len(),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::DimensionMismatch {
            what: "model width divisible by heads",
            expected: n_heads,
            got: d,
        });
    }
    for row in keys.iter().chain(values) {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                what: "key/value width",
                expected: d,
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// `softmax(q k^T / sqrt(d_k)) v` evaluated per head, heads concatenated.
pub fn cross_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], n_heads: usize) -> Result<AttentionOutput> {
    check(q, keys, values, n_heads)?;
    let d = q.len();
    let dk = d / n_heads;
    let m = keys.len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut mixed = vec![0.0; d];
    let mut weights = vec![0.0; n_heads * m];
    for h in 0..n_heads {
        let span = h * dk..(h + 1) * dk;
        let w = &mut weights[h * m..(h + 1) * m];
        for (j, k) in keys.iter().enumerate() {
            w[j] = scale * q[span.clone()].iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in w.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for s in w.iter_mut() {
            *s /= z;
        }
        for (j, v) in values.iter().enumerate() {
            for (o, x) in mixed[span.clone()].iter_mut().zip(&v[span.clone()]) {
                *o += w[j] * x;
            }
        }
    }
    Ok(AttentionOutput { mixed, weights })
}

/// Gradients of `cross_attention` given the upstream gradient of `mixed`.
pub struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dkeys: Vec<Vec<f64>>,
    pub dvalues: Vec<Vec<f64>>,
}

pub fn cross_attention_backward(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    n_heads: usize,
    out: &AttentionOutput,
    dmixed: &[f64],
) -> AttentionGrads {
    let d = q.len();
    let dk = d / n_heads;
    let m = keys.len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; d];
    let mut dkeys = vec![vec![0.0; d]; m];
    let mut dvalues = vec![vec![0.0; d]; m];
    let mut dw = vec![0.0; m];
    for h in 0..n_heads {
        let span = h * dk..(h + 1) * dk;
        let w = &out.weights[h * m..(h + 1) * m];
        let dout = &dmixed[span.clone()];
        for j in 0..m {
            dw[j] = dout.iter().zip(&values[j][span.clone()]).map(|(a, b)| a * b).sum();
            for (g, o) in dvalues[j][span.clone()].iter_mut().zip(dout) {
                *g += w[j] * o;
            }
        }
        let avg: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for j in 0..m {
            let ds = w[j] * (dw[j] - avg) * scale;
            for (g, k) in dq[span.clone()].iter_mut().zip(&keys[j][span.clone()]) {
                *g += ds * k;
            }
            for (g, x) in dkeys[j][span.clone()].iter_mut().zip(&q[span.clone()]) {
                *g += ds * x;
            }
        }
    }
    AttentionGrads { dq, dkeys, dvalues }
}

/// Cross-attention layer with learned query/key/value/output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

/// Context-side half of the attention, reusable across queries.
#[derive(Debug, Clone)]
pub struct KeyValues {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Vec<f64>,
    pub attn: AttentionOutput,
    pub output: Vec<f64>,
}

impl CrossAttention {
    pub fn build(layout: &mut ParamLayout, name: &str, d_model: usize, n_heads: usize) -> Self {
        Self {
            wq: layout.linear(&format!("{name}.query"), d_model, d_model, Init::FanIn),
            wk: layout.linear(&format!("{name}.key"), d_model, d_model, Init::FanIn),
            wv: layout.linear(&format!("{name}.value"), d_model, d_model, Init::FanIn),
            wo: layout.linear(&format!("{name}.out"), d_model, d_model, Init::FanIn),
            n_heads,
        }
    }

    pub fn key_values(&self, p: &[f64], tokens: &[Vec<f64>]) -> KeyValues {
        KeyValues {
            keys: tokens.iter().map(|t| self.wk.forward(p, t)).collect(),
            values: tokens.iter().map(|t| self.wv.forward(p, t)).collect(),
        }
    }

    pub fn forward(&self, p: &[f64], query: &[f64], kv: &KeyValues) -> Result<AttentionCache> {
        let q = self.wq.forward(p, query);
        let attn = cross_attention(&q, &kv.keys, &kv.values, self.n_heads)?;
        let output = self.wo.forward(p, &attn.mixed);
        Ok(AttentionCache { q, attn, output })
    }

    /// Accumulates parameter gradients; adds the query gradient into `dquery`
    /// and per-token gradients into `dtokens`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        query: &[f64],
        tokens: &[Vec<f64>],
        kv: &KeyValues,
        cache: &AttentionCache,
        dout: &[f64],
        grad: &mut [f64],
        dquery: &mut [f64],
        dtokens: &mut [Vec<f64>],
    ) {
        let mut dmixed = vec![0.0; dout.len()];
        self.wo.backward(p, &cache.attn.mixed, dout, grad, Some(&mut dmixed));
        let g = cross_attention_backward(&cache.q, &kv.keys, &kv.values, self.n_heads, &cache.attn, &dmixed);
        self.wq.backward(p, query, &g.dq, grad, Some(dquery));
        for (j, tok) in tokens.iter().enumerate() {
            self.wk.backward(p, tok, &g.dkeys[j], grad, Some(&mut dtokens[j]));
            self.wv.backward(p, tok, &g.dvalues[j], grad, Some(&mut dtokens[j]));
        }
    }
}
