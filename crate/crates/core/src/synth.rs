//! Synthetic conditional-distribution tasks with exact posteriors.
//!
//! Every task maps a context `(features, attributes)` to a Gaussian mixture
//! over the target through piecewise-affine rules, so the true posterior is
//! available in closed form for any context.
//!
//! | task | posterior |
//! |------|-----------|
//! | A | sharp unimodal, `N(0.8 x1 - 0.5 x2, 0.15^2)` |
//! | B | symmetric bimodal, modes at `+-(1.5 + 0.5 x1)` with std 0.2 |
//! | C | heteroscedastic, `N(0.5 x1, (0.5 + 0.4 x2)^2)` |
//! | D | mode picked by a binary attribute, `N(-1.2 + 2.4 a + 0.3 x1, 0.25^2)` |
//!
//! Features are uniform on `[-1, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::rng::{normal, RandomStream};
use crate::types::ConditioningContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    A,
    B,
    C,
    D,
}

impl TaskName {
    pub const ALL: [TaskName; 4] = [TaskName::A, TaskName::B, TaskName::C, TaskName::D];
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(TaskName::A),
            "B" => Ok(TaskName::B),
            "C" => Ok(TaskName::C),
            "D" => Ok(TaskName::D),
            _ => Err(Error::UnknownTask(s.to_string())),
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// `bias + features . f + attributes . a`, optionally floored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub bias: f64,
    #[serde(default)]
    pub features: Vec<f64>,
    #[serde(default)]
    pub attributes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
}

impl AffineMap {
    pub fn constant(bias: f64) -> Self {
        Self {
            bias,
            features: vec![],
            attributes: vec![],
            floor: None,
        }
    }

    pub fn eval(&self, ctx: &ConditioningContext) -> f64 {
        let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let v = self.bias + dot(&self.features, &ctx.features) + dot(&self.attributes, &ctx.attributes);
        self.floor.map_or(v, |f| v.max(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMap {
    /// Unnormalized weight; clamped at zero, then normalized across components.
    pub weight: AffineMap,
    pub mean: AffineMap,
    pub std: AffineMap,
}

/// How attributes are drawn when generating data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    /// Uniform on `[-1, 1]`, not used by the posterior.
    Uninformative,
    /// Bernoulli(0.5) flags in `{0, 1}`.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTaskSpec {
    pub name: TaskName,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub attribute_kind: AttributeKind,
    pub components: Vec<ComponentMap>,
}

fn affine(bias: f64, features: &[f64], attributes: &[f64]) -> AffineMap {
    AffineMap {
        bias,
        features: features.to_vec(),
        attributes: attributes.to_vec(),
        floor: None,
    }
}

pub fn make_task(name: TaskName) -> GmmTaskSpec {
    let single = |mean: AffineMap, std: AffineMap| {
        vec![ComponentMap {
            weight: AffineMap::constant(1.0),
            mean,
            std,
        }]
    };
    let (attribute_kind, components) = match name {
        TaskName::A => (
            AttributeKind::Uninformative,
            single(affine(0.0, &[0.8, -0.5], &[]), AffineMap::constant(0.15)),
        ),
        TaskName::B => (
            AttributeKind::Uninformative,
            vec![
                ComponentMap {
                    weight: AffineMap::constant(0.5),
                    mean: affine(-1.5, &[-0.5, 0.0], &[]),
                    std: AffineMap::constant(0.2),
                },
                ComponentMap {
                    weight: AffineMap::constant(0.5),
                    mean: affine(1.5, &[0.5, 0.0], &[]),
                    std: AffineMap::constant(0.2),
                },
            ],
        ),
        TaskName::C => (
            AttributeKind::Uninformative,
            single(
                affine(0.0, &[0.5, 0.0], &[]),
                AffineMap {
                    floor: Some(0.05),
                    ..affine(0.5, &[0.0, 0.4], &[])
                },
            ),
        ),
        TaskName::D => (
            AttributeKind::Binary,
            single(affine(-1.2, &[0.3, 0.0], &[2.4]), AffineMap::constant(0.25)),
        ),
    };
    GmmTaskSpec {
        name,
        feature_dim: 2,
        attribute_dim: 1,
        attribute_kind,
        components,
    }
}

impl GmmTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("task needs components and features".into()));
        }
        Ok(())
    }

    /// Exact conditional distribution of the target given `ctx`.
    pub fn oracle_posterior(&self, ctx: &ConditioningContext) -> Result<GaussianMixture> {
        ctx.check_dims(self.feature_dim, self.attribute_dim)?;
        let raw: Vec<f64> = self.components.iter().map(|c| c.weight.eval(ctx).max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateMixture("all component weights are zero".into()));
        }
        GaussianMixture::new(
            raw.iter().map(|w| w / total).collect(),
            self.components.iter().map(|c| c.mean.eval(ctx)).collect(),
            self.components.iter().map(|c| c.std.eval(ctx)).collect(),
        )
    }

    /// Draws a context from the task's context distribution.
    pub fn draw_context(&self, rng: &mut impl Rng) -> ConditioningContext {
        let features = (0..self.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let attributes = (0..self.attribute_dim)
            .map(|_| match self.attribute_kind {
                AttributeKind::Uninformative => rng.random_range(-1.0..1.0),
                AttributeKind::Binary => f64::from(u8::from(rng.random_bool(0.5))),
            })
            .collect();
        ConditioningContext { features, attributes }
    }

    /// Posterior when attributes are unobserved (marginalized over their law).
    pub fn vision_only_posterior(&self, features: &[f64]) -> Result<GaussianMixture> {
        let contexts: Vec<(f64, ConditioningContext)> = match self.attribute_kind {
            AttributeKind::Binary if self.attribute_dim > 0 => (0..1usize << self.attribute_dim)
                .map(|bits| {
                    let attributes = (0..self.attribute_dim).map(|i| ((bits >> i) & 1) as f64).collect();
                    (
                        1.0 / (1usize << self.attribute_dim) as f64,
                        ConditioningContext {
                            features: features.to_vec(),
                            attributes,
                        },
                    )
                })
                .collect(),
            _ => vec![(
                1.0,
                ConditioningContext {
                    features: features.to_vec(),
                    attributes: vec![0.0; self.attribute_dim],
                },
            )],
        };
        let (mut w, mut m, mut s) = (vec![], vec![], vec![]);
        for (p, ctx) in &contexts {
            let post = self.oracle_posterior(ctx)?;
            w.extend(post.weights.iter().map(|x| x * p));
            m.extend(post.means);
            s.extend(post.stds);
        }
        GaussianMixture::new(w, m, s)
    }
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub features: Vec<f64>,
    #[serde(default)]
    pub attributes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

impl Row {
    pub fn context(&self) -> ConditioningContext {
        ConditioningContext {
            features: self.features.clone(),
            attributes: self.attributes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub task: TaskName,
    pub seed: u64,
    pub rows: Vec<Row>,
}

impl SynthDataset {
    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.y).collect()
    }

    pub fn contexts(&self) -> Vec<ConditioningContext> {
        self.rows.iter().map(Row::context).collect()
    }
}

/// Draws `n` rows; row `i` uses its own derived stream.
pub fn generate(spec: &GmmTaskSpec, n: usize, seed: u64) -> Result<SynthDataset> {
    let base = RandomStream::new(seed, 0x5eed_da7a);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.derive(i as u64).rng();
        let ctx = spec.draw_context(&mut rng);
        let post = spec.oracle_posterior(&ctx)?;
        let u: f64 = rng.random();
        let z = normal(&mut rng);
        rows.push(Row {
            features: ctx.features,
            attributes: ctx.attributes,
            y: Some(post.draw(u, z)),
        });
    }
    Ok(SynthDataset {
        task: spec.name,
        seed,
        rows,
    })
}

/// Draws one target for each given context.
pub fn draw_targets(spec: &GmmTaskSpec, contexts: &[ConditioningContext], stream: RandomStream) -> Result<Vec<f64>> {
    contexts
        .iter()
        .enumerate()
        .map(|(i, ctx)| {
            let mut rng = stream.derive(i as u64).rng();
            let post = spec.oracle_posterior(ctx)?;
            let u: f64 = rng.random();
            Ok(post.draw(u, normal(&mut rng)))
        })
        .collect()
}

/// 1-Wasserstein distance between two empirical distributions, computed
/// exactly as the integral of the gap between their quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    if x.len() == y.len() {
        return Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64);
    }
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_x = (i + 1) as f64 / n as f64;
        let next_y = (j + 1) as f64 / m as f64;
        let next = next_x.min(next_y);
        total += (next - u) * (x[i] - y[j]).abs();
        u = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeHit {
    pub mean: f64,
    pub weight: f64,
    pub fraction: f64,
    pub covered: bool,
}

/// Fraction of samples within `radius` of each component mean; a mode is
/// covered when that fraction reaches half its weight.
pub fn mode_coverage(samples: &[f64], mixture: &GaussianMixture, radius: f64) -> Result<Vec<ModeHit>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidRange(format!("radius {radius} must be positive")));
    }
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(mixture
        .means
        .iter()
        .zip(&mixture.weights)
        .map(|(&mean, &weight)| {
            let hits = samples.iter().filter(|&&s| (s - mean).abs() <= radius).count();
            let fraction = hits as f64 / samples.len() as f64;
            ModeHit {
                mean,
                weight,
                fraction,
                covered: fraction >= weight / 2.0,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(f: &[f64], a: &[f64]) -> ConditioningContext {
        ConditioningContext::new(f.to_vec(), a.to_vec()).unwrap()
    }

    #[test]
    fn task_names() {
        assert_eq!("b".parse::<TaskName>().unwrap(), TaskName::B);
        assert_eq!("Z".parse::<TaskName>(), Err(Error::UnknownTask("Z".into())));
    }

    #[test]
    fn task_b_mean_sits_in_a_trough() {
        let spec = make_task(TaskName::B);
        for x1 in [-1.0, 0.0, 0.7] {
            let post = spec.oracle_posterior(&ctx(&[x1, 0.3], &[0.2])).unwrap();
            assert!(post.mean().abs() < 1e-15);
            let peak = post.pdf(post.means[1]);
            assert!(post.pdf(post.mean()) < 0.1 * peak);
        }
    }

    #[test]
    fn task_a_and_d_by_construction() {
        let a = make_task(TaskName::A).oracle_posterior(&ctx(&[0.5, 0.2], &[0.0])).unwrap();
        assert_eq!(a.components(), 1);
        assert!((a.std() - 0.15).abs() < 1e-12);
        let d = make_task(TaskName::D);
        let m0 = d.oracle_posterior(&ctx(&[0.1, 0.1], &[0.0])).unwrap().mean();
        let m1 = d.oracle_posterior(&ctx(&[0.1, 0.1], &[1.0])).unwrap().mean();
        assert!((m1 - m0 - 2.4).abs() < 1e-12);
        let marginal = d.vision_only_posterior(&[0.1, 0.1]).unwrap();
        assert_eq!(marginal.components(), 2);
        assert!((marginal.mean() - 0.5 * (m0 + m1)).abs() < 1e-12);
    }

    #[test]
    fn task_c_dilates_with_x2() {
        let c = make_task(TaskName::C);
        let lo = c.oracle_posterior(&ctx(&[0.0, -1.0], &[0.0])).unwrap().std();
        let hi = c.oracle_posterior(&ctx(&[0.0, 1.0], &[0.0])).unwrap().std();
        assert!((lo - 0.1).abs() < 1e-12 && (hi - 0.9).abs() < 1e-12);
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = make_task(TaskName::D);
        assert_eq!(generate(&spec, 50, 3).unwrap(), generate(&spec, 50, 3).unwrap());
        assert_ne!(generate(&spec, 50, 3).unwrap(), generate(&spec, 50, 4).unwrap());
        let d = generate(&spec, 200, 1).unwrap();
        assert!(d.rows.iter().all(|r| r.attributes[0] == 0.0 || r.attributes[0] == 1.0));
        assert!(d.rows.iter().all(|r| r.features.iter().all(|f| (-1.0..1.0).contains(f))));
    }

    #[test]
    fn degenerate_weights_pick_the_first_component() {
        let mut spec = make_task(TaskName::B);
        spec.components[0].weight = AffineMap::constant(1.0);
        spec.components[1].weight = AffineMap::constant(0.0);
        let d = generate(&spec, 500, 2).unwrap();
        for r in &d.rows {
            let m = -1.5 - 0.5 * r.features[0];
            assert!((r.y.unwrap() - m).abs() < 6.0 * 0.2);
        }
    }

    #[test]
    fn empirical_moments_converge() {
        // fixed context bucket: generate many draws at one context
        let spec = make_task(TaskName::C);
        let c = ctx(&[0.6, 0.0], &[0.0]);
        let contexts = vec![c.clone(); 100_000];
        let ys = draw_targets(&spec, &contexts, RandomStream::new(8, 0)).unwrap();
        let post = spec.oracle_posterior(&c).unwrap();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(((mean - post.mean()) / post.mean()).abs() < 0.01);
        assert!((mean - post.mean()).abs() < 3.0 * post.std() / n.sqrt());
        assert!(((std - post.std()) / post.std()).abs() < 0.01);
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein1(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[], &[1.0]), Err(Error::EmptySample));
        // unequal sizes: {0} vs {0, 1} differ on half the quantile range
        assert!((wasserstein1(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((wasserstein1(&[0.0, 0.0], &[0.0, 0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let a = RandomStream::new(1, 0).gaussian_draw(100_000);
        let b: Vec<f64> = RandomStream::new(1, 1).gaussian_draw(100_000).iter().map(|v| v + 0.5).collect();
        let w = wasserstein1(&a, &b).unwrap();
        assert!((w - 0.5).abs() < 0.025, "{w}");
    }

    #[test]
    fn mode_coverage_cases() {
        let mix = GaussianMixture::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.1, 0.1]).unwrap();
        let hits = mode_coverage(&[-1.0, 1.0, -1.0, 1.0], &mix, 0.3).unwrap();
        assert!(hits.iter().all(|h| h.covered && h.fraction == 0.5));
        let hits = mode_coverage(&[-1.0; 10], &mix, 0.3).unwrap();
        assert!(hits[0].covered && !hits[1].covered);
        assert!(mode_coverage(&[0.0], &mix, 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn wasserstein_is_symmetric_and_shift_exact(
            a in proptest::collection::vec(-10.0f64..10.0, 1..30),
            b in proptest::collection::vec(-10.0f64..10.0, 1..30),
            c in -5.0f64..5.0,
        ) {
            let ab = wasserstein1(&a, &b).unwrap();
            proptest::prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() < 1e-9);
            let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
            proptest::prop_assert!((wasserstein1(&a, &shifted).unwrap() - c.abs()).abs() < 1e-9);
        }
    }
}
