//! Analytic gradients of the noise-prediction loss against central finite
//! differences on small probe networks.

use diffreg::{Architecture, ConditioningContext, Denoiser, Example, Fusion, McsnConfig, MlpConfig, RandomStream};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn contexts(feature_dim: usize, attribute_dim: usize) -> Vec<ConditioningContext> {
    (0..4)
        .map(|i| {
            let f = RandomStream::new(100 + i, 0).gaussian_draw(feature_dim);
            let a = RandomStream::new(200 + i, 0).gaussian_draw(attribute_dim);
            ConditioningContext::new(f, a).unwrap()
        })
        .collect()
}

fn check(arch: Architecture, max_params: usize, abs_floor: f64) {
    let den = Denoiser::new(arch.clone()).unwrap();
    assert!(den.num_params() <= max_params, "{} params", den.num_params());
    let params: Vec<f64> = RandomStream::new(9, 1)
        .gaussian_draw(den.num_params())
        .iter()
        .map(|v| 0.7 * v)
        .collect();
    let ctxs = contexts(arch.feature_dim(), arch.attribute_dim());
    let eps = RandomStream::new(10, 0).gaussian_draw(ctxs.len());
    let batch: Vec<Example<'_>> = ctxs
        .iter()
        .enumerate()
        .map(|(i, c)| Example {
            y_t: 0.6 * i as f64 - 0.8,
            t: 1 + 97 * i,
            ctx: c,
            target: eps[i],
        })
        .collect();

    let (loss, grad) = den.loss_and_grad(&params, &batch).unwrap();
    assert!((loss - den.loss(&params, &batch).unwrap()).abs() < 1e-14);
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut up = params.clone();
        up[i] += H;
        let mut down = params.clone();
        down[i] -= H;
        let fd = (den.loss(&up, &batch).unwrap() - den.loss(&down, &batch).unwrap()) / (2.0 * H);
        let rel = ((grad[i] - fd).abs() - abs_floor).max(0.0) / (fd.abs() + 1e-8);
        worst = worst.max(rel);
        let name = &den
            .layout()
            .tensors()
            .iter()
            .find(|t| t.offset <= i && i < t.offset + t.len())
            .unwrap()
            .name;
        assert!(rel <= TOL, "{} coordinate {i} ({name}): analytic {} fd {fd} rel {rel}", arch.name(), grad[i]);
    }
    eprintln!("{}: {} params, worst relative error {worst:.2e}", arch.name(), params.len());
}

#[test]
fn mlp_probe_gradients() {
    check(
        Architecture::Mlp(MlpConfig {
            feature_dim: 2,
            attribute_dim: 1,
            time_dim: 2,
            hidden: vec![6, 4],
        }),
        100,
        0.0,
    );
}

fn mcsn_probe(fusion: Fusion, attribute_dim: usize) -> McsnConfig {
    McsnConfig {
        feature_dim: 2,
        attribute_dim,
        d_model: 2,
        n_heads: 2,
        time_dim: 2,
        query_hidden: vec![],
        attribute_hidden: vec![2],
        head_hidden: vec![3],
        fusion,
    }
}

#[test]
fn mcsn_probe_gradients() {
    check(Architecture::Mcsn(mcsn_probe(Fusion::Tokens, 1)), 100, 0.0);
}

#[test]
fn mcsn_concat_probe_gradients() {
    check(Architecture::Mcsn(mcsn_probe(Fusion::Concat, 1)), 100, 0.0);
}

#[test]
fn mcsn_vision_only_probe_gradients() {
    check(Architecture::Mcsn(mcsn_probe(Fusion::Tokens, 0)), 100, 0.0);
}

#[test]
fn small_mcsn_gradients() {
    // a deeper configuration outside the probe budget; finite-difference
    // roundoff (~1e-11) dominates on its smallest coordinates
    let mut cfg = McsnConfig::small(3, 2);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.time_dim = 4;
    cfg.query_hidden = vec![6];
    cfg.attribute_hidden = vec![4, 3];
    cfg.head_hidden = vec![5, 5];
    check(Architecture::Mcsn(cfg), 2000, 1e-10);
}
