//! Noise-prediction networks: a plain MLP and the multimodal conditional
//! score network (MCSN) that fuses context through cross-attention.

use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, CrossAttention, KeyValues};
use super::embed::sinusoidal;
use super::{Init, Linear, Mlp, MlpCache, ParamLayout};
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::schedule::NoiseSchedule;
use crate::types::ConditioningContext;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
}

/// How features and encoded attributes are presented to the attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// One token per modality.
    #[default]
    Tokens,
    /// A single token projected from the concatenation `[features; h_attr]`.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsnConfig {
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub time_dim: usize,
    /// Hidden widths of the query encoder before its projection to `d_model`.
    pub query_hidden: Vec<usize>,
    /// Widths of the attribute encoder layers; the last is the `h_attr` size.
    pub attribute_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub fusion: Fusion,
}

impl McsnConfig {
    /// Desk-scale configuration used by the synthetic experiments.
    pub fn small(feature_dim: usize, attribute_dim: usize) -> Self {
        Self {
            feature_dim,
            attribute_dim,
            d_model: 32,
            n_heads: 4,
            time_dim: 16,
            query_hidden: vec![32],
            attribute_hidden: vec![16, 16],
            head_hidden: vec![64, 64],
            fusion: Fusion::Tokens,
        }
    }

    /// Full-size configuration: 512-d visual embedding, 8 attributes,
    /// d_model 128 with 4 heads, attribute MLP 64-64, and a 640-wide head,
    /// which totals about 0.68M parameters.
    pub fn full_scale() -> Self {
        Self {
            feature_dim: 512,
            attribute_dim: 8,
            d_model: 128,
            n_heads: 4,
            time_dim: 128,
            query_hidden: vec![128],
            attribute_hidden: vec![64, 64],
            head_hidden: vec![640, 640],
            fusion: Fusion::Tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpConfig),
    Mcsn(McsnConfig),
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Mlp(c) => c.feature_dim,
            Architecture::Mcsn(c) => c.feature_dim,
        }
    }

    pub fn attribute_dim(&self) -> usize {
        match self {
            Architecture::Mlp(c) => c.attribute_dim,
            Architecture::Mcsn(c) => c.attribute_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp(_) => "mlp",
            Architecture::Mcsn(_) => "mcsn",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (fd, td) = match self {
            Architecture::Mlp(c) => {
                if c.hidden.iter().any(|&w| w == 0) {
                    return bad("mlp hidden widths must be >= 1".into());
                }
                (c.feature_dim, c.time_dim)
            }
            Architecture::Mcsn(c) => {
                if c.d_model == 0 || c.n_heads == 0 || c.d_model % c.n_heads != 0 {
                    return bad(format!("d_model {} not divisible by n_heads {}", c.d_model, c.n_heads));
                }
                let widths = c.query_hidden.iter().chain(&c.attribute_hidden).chain(&c.head_hidden);
                if widths.into_iter().any(|&w| w == 0) {
                    return bad("hidden widths must be >= 1".into());
                }
                if c.attribute_dim > 0 && c.attribute_hidden.is_empty() {
                    return bad("attribute encoder needs at least one layer".into());
                }
                (c.feature_dim, c.time_dim)
            }
        };
        if fd == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if td == 0 || td % 2 != 0 {
            return Err(Error::OddDimension(td));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpNet {
    time_dim: usize,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
struct McsnNet {
    time_dim: usize,
    fusion: Fusion,
    query: Mlp,
    attr: Option<Mlp>,
    feature_proj: Option<Linear>,
    attr_proj: Option<Linear>,
    concat_proj: Option<Linear>,
    attn: CrossAttention,
    head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Mlp(MlpNet),
    Mcsn(McsnNet),
}

/// One regression example for the squared-error objective
/// `(f(y_t, t, ctx) - target)^2`.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub y_t: f64,
    pub t: usize,
    pub ctx: &'a ConditioningContext,
    pub target: f64,
}

/// Parametric noise predictor `eps_theta(y_t, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    layout: ParamLayout,
    net: Net,
}

impl Denoiser {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layout = ParamLayout::default();
        let net = match &arch {
            Architecture::Mlp(c) => {
                let mut widths = vec![1 + c.time_dim + c.feature_dim + c.attribute_dim];
                widths.extend(&c.hidden);
                widths.push(1);
                Net::Mlp(MlpNet {
                    time_dim: c.time_dim,
                    mlp: Mlp::build(&mut layout, "mlp", &widths, false, true),
                })
            }
            Architecture::Mcsn(c) => {
                let d = c.d_model;
                let mut qw = vec![1 + c.time_dim];
                qw.extend(&c.query_hidden);
                qw.push(d);
                let query = Mlp::build(&mut layout, "query", &qw, false, false);
                let attr = (c.attribute_dim > 0).then(|| {
                    let mut aw = vec![c.attribute_dim];
                    aw.extend(&c.attribute_hidden);
                    Mlp::build(&mut layout, "attribute", &aw, false, false)
                });
                let h_attr = attr.as_ref().map_or(0, |m| m.output_dim());
                let (feature_proj, attr_proj, concat_proj) = match c.fusion {
                    Fusion::Tokens => (
                        Some(layout.linear("feature_token", c.feature_dim, d, Init::FanIn)),
                        attr.as_ref().map(|_| layout.linear("attribute_token", h_attr, d, Init::FanIn)),
                        None,
                    ),
                    Fusion::Concat => (
                        None,
                        None,
                        Some(layout.linear("context_token", c.feature_dim + h_attr, d, Init::FanIn)),
                    ),
                };
                let attn = CrossAttention::build(&mut layout, "attention", d, c.n_heads);
                let mut hw = vec![d];
                hw.extend(&c.head_hidden);
                hw.push(1);
                let head = Mlp::build(&mut layout, "head", &hw, false, true);
                Net::Mcsn(McsnNet {
                    time_dim: c.time_dim,
                    fusion: c.fusion,
                    query,
                    attr,
                    feature_proj,
                    attr_proj,
                    concat_proj,
                    attn,
                    head,
                })
            }
        };
        Ok(Self { arch, layout, net })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    pub fn init_params(&self, stream: RandomStream) -> Vec<f64> {
        self.layout.init(stream)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector length",
                expected: self.num_params(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Output of the attribute encoder (MCSN only; empty for vision-only).
    pub fn attribute_encode(&self, params: &[f64], attributes: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if attributes.len() != self.arch.attribute_dim() {
            return Err(Error::DimensionMismatch {
                what: "attribute vector length",
                expected: self.arch.attribute_dim(),
                got: attributes.len(),
            });
        }
        match &self.net {
            Net::Mcsn(n) => Ok(n.attr.as_ref().map_or_else(Vec::new, |m| m.forward(params, attributes))),
            Net::Mlp(_) => Ok(attributes.to_vec()),
        }
    }

    /// Precomputes everything that depends only on the context.
    pub fn prepare<'a>(&'a self, params: &'a [f64], ctx: &ConditioningContext) -> Result<Prepared<'a>> {
        self.check_params(params)?;
        ctx.check_dims(self.arch.feature_dim(), self.arch.attribute_dim())?;
        let inner = match &self.net {
            Net::Mlp(_) => PreparedInner::Mlp {
                context: ctx.features.iter().chain(&ctx.attributes).copied().collect(),
            },
            Net::Mcsn(n) => {
                let tokens = n.tokens(params, ctx).tokens;
                let kv = n.attn.key_values(params, &tokens);
                PreparedInner::Mcsn { kv }
            }
        };
        Ok(Prepared {
            den: self,
            params,
            inner,
        })
    }

    /// Predicted noise `eps_hat` for state `y_t` at step `t`.
    pub fn forward(&self, params: &[f64], y_t: f64, t: usize, ctx: &ConditioningContext) -> Result<f64> {
        self.prepare(params, ctx)?.eps(y_t, t)
    }

    /// Mean squared error over `batch` without gradients.
    pub fn loss(&self, params: &[f64], batch: &[Example<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for ex in batch {
            let r = self.forward(params, ex.y_t, ex.t, ex.ctx)? - ex.target;
            total += r * r;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean squared error over `batch` and its gradient with respect to every
    /// parameter. Per-example gradients are accumulated in batch order.
    pub fn loss_and_grad(&self, params: &[f64], batch: &[Example<'_>]) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut grad = vec![0.0; params.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            ex.ctx.check_dims(self.arch.feature_dim(), self.arch.attribute_dim())?;
            let r = match &self.net {
                Net::Mlp(n) => n.backward(params, ex, scale, &mut grad)?,
                Net::Mcsn(n) => n.backward(params, ex, scale, &mut grad)?,
            };
            total += r * r;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok((total * scale, grad))
    }
}

enum PreparedInner {
    Mlp { context: Vec<f64> },
    Mcsn { kv: KeyValues },
}

/// A denoiser bound to parameters and one context.
pub struct Prepared<'a> {
    den: &'a Denoiser,
    params: &'a [f64],
    inner: PreparedInner,
}

impl Prepared<'_> {
    pub fn eps(&self, y_t: f64, t: usize) -> Result<f64> {
        let p = self.params;
        let out = match (&self.den.net, &self.inner) {
            (Net::Mlp(n), PreparedInner::Mlp { context }) => {
                let x = n.input(y_t, t, context);
                n.mlp.forward(p, &x)[0]
            }
            (Net::Mcsn(n), PreparedInner::Mcsn { kv }) => {
                let h_q = n.query.forward(p, &query_input(y_t, t, n.time_dim));
                let a = n.attn.forward(p, &h_q, kv)?;
                let h: Vec<f64> = h_q.iter().zip(&a.output).map(|(x, y)| x + y).collect();
                n.head.forward(p, &h)[0]
            }
            _ => unreachable!("prepared state always matches its network"),
        };
        if !out.is_finite() {
            return Err(Error::NonFiniteActivation("denoiser output"));
        }
        Ok(out)
    }
}

fn query_input(y_t: f64, t: usize, time_dim: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(1 + time_dim);
    x.push(y_t);
    x.extend(sinusoidal(t as f64, time_dim));
    x
}

impl MlpNet {
    fn input(&self, y_t: f64, t: usize, context: &[f64]) -> Vec<f64> {
        let mut x = query_input(y_t, t, self.time_dim);
        x.extend_from_slice(context);
        x
    }

    /// Returns the residual `f - target` and accumulates `scale * d(r^2)`.
    fn backward(&self, p: &[f64], ex: &Example<'_>, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let context: Vec<f64> = ex.ctx.features.iter().chain(&ex.ctx.attributes).copied().collect();
        let cache = self.mlp.forward_cached(p, &self.input(ex.y_t, ex.t, &context));
        let r = cache.output[0] - ex.target;
        if !r.is_finite() {
            return Err(Error::NonFiniteActivation("denoiser output"));
        }
        self.mlp.backward(p, &cache, &[2.0 * r * scale], grad, None);
        Ok(r)
    }
}

struct TokenCache {
    tokens: Vec<Vec<f64>>,
    attr: Option<MlpCache>,
    concat_input: Option<Vec<f64>>,
}

impl McsnNet {
    fn tokens(&self, p: &[f64], ctx: &ConditioningContext) -> TokenCache {
        let attr = self.attr.as_ref().map(|m| m.forward_cached(p, &ctx.attributes));
        let h_attr: &[f64] = attr.as_ref().map_or(&[], |c| &c.output);
        match self.fusion {
            Fusion::Tokens => {
                let mut tokens = vec![self.feature_proj.unwrap().forward(p, &ctx.features)];
                if let Some(proj) = &self.attr_proj {
                    tokens.push(proj.forward(p, h_attr));
                }
                TokenCache {
                    tokens,
                    attr,
                    concat_input: None,
                }
            }
            Fusion::Concat => {
                let x: Vec<f64> = ctx.features.iter().chain(h_attr).copied().collect();
                TokenCache {
                    tokens: vec![self.concat_proj.unwrap().forward(p, &x)],
                    attr,
                    concat_input: Some(x),
                }
            }
        }
    }

    fn backward(&self, p: &[f64], ex: &Example<'_>, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let tc = self.tokens(p, ex.ctx);
        let kv = self.attn.key_values(p, &tc.tokens);
        let q_cache = self.query.forward_cached(p, &query_input(ex.y_t, ex.t, self.time_dim));
        let h_q = &q_cache.output;
        let a: AttentionCache = self.attn.forward(p, h_q, &kv)?;
        let h: Vec<f64> = h_q.iter().zip(&a.output).map(|(x, y)| x + y).collect();
        let head = self.head.forward_cached(p, &h);
        let r = head.output[0] - ex.target;
        if !r.is_finite() {
            return Err(Error::NonFiniteActivation("denoiser output"));
        }

        let mut dh = vec![0.0; h.len()];
        self.head.backward(p, &head, &[2.0 * r * scale], grad, Some(&mut dh));
        let mut dh_q = dh.clone();
        let mut dtokens = vec![vec![0.0; h.len()]; tc.tokens.len()];
        self.attn
            .backward(p, h_q, &tc.tokens, &kv, &a, &dh, grad, &mut dh_q, &mut dtokens);
        self.query.backward(p, &q_cache, &dh_q, grad, None);

        match self.fusion {
            Fusion::Tokens => {
                self.feature_proj
                    .unwrap()
                    .backward(p, &ex.ctx.features, &dtokens[0], grad, None);
                if let (Some(proj), Some(attr), Some(cache)) = (&self.attr_proj, &self.attr, &tc.attr) {
                    let mut dattr = vec![0.0; proj.input];
                    proj.backward(p, &cache.output, &dtokens[1], grad, Some(&mut dattr));
                    attr.backward(p, cache, &dattr, grad, None);
                }
            }
            Fusion::Concat => {
                let proj = self.concat_proj.unwrap();
                let x = tc.concat_input.as_ref().unwrap();
                let mut dx = vec![0.0; x.len()];
                proj.backward(p, x, &dtokens[0], grad, Some(&mut dx));
                if let (Some(attr), Some(cache)) = (&self.attr, &tc.attr) {
                    attr.backward(p, cache, &dx[ex.ctx.features.len()..], grad, None);
                }
            }
        }
        Ok(r)
    }
}

/// Converts a noise prediction into a score estimate, `-eps / sqrt(1 - ab_t)`.
pub fn eps_to_score(eps_hat: f64, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    Ok(-eps_hat / (1.0 - ab).sqrt())
}

/// Inverse of [`eps_to_score`].
pub fn score_to_eps(score: f64, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    Ok(-score * (1.0 - ab).sqrt())
}
