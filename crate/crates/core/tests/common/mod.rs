#![allow(dead_code)]

use mcvivit::model::{Bound, ParamStore};
use mcvivit::{Graph, Result, Tensor, Var};
use proptest::test_runner::{Config, RngSeed};
use rand::Rng;

/// Fixed-seed proptest configuration without regression files.
pub fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign.
pub fn away_from_zero<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// `max(|a|, |b|, 1e-4)`-relative error. The floor keeps exact zeros, where
/// differences only see round-off, from dominating.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Five-point central differences of `f` at `params`, written independently
/// of the library's checker.
pub fn numeric_grad(f: &dyn Fn(&[Tensor<f64>]) -> f64, params: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].numel()];
        for (e, g) in grad.iter_mut().enumerate() {
            let x = params[pi].data()[e];
            let mut at = |v: f64| {
                work[pi].data_mut()[e] = v;
                f(&work)
            };
            let (m2, m1, p1, p2) = (at(x - 2.0 * h), at(x - h), at(x + h), at(x + 2.0 * h));
            work[pi].data_mut()[e] = x;
            *g = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        }
        out.push(Tensor::from_vec(params[pi].shape(), grad).unwrap());
    }
    out
}

/// Worst elementwise relative error between two gradient lists.
pub fn max_rel(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(&p, &q)| rel(p, q)))
        .fold(0.0, f64::max)
}

pub type Builder<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Value and reverse-mode gradients of `build` over `params`.
pub fn reverse(build: Builder, params: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    (g.value(out).item(), grads)
}

/// Forward value of `build` with every parameter held constant.
pub fn forward(build: Builder, params: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).item()
}

/// Relative error between reverse-mode and five-point numeric gradients.
pub fn grad_error(build: Builder, params: &[Tensor<f64>], h: f64) -> f64 {
    let (_, analytic) = reverse(build, params);
    let numeric = numeric_grad(&|ps| forward(build, ps), params, h);
    max_rel(&analytic, &numeric)
}

/// Overwrites every parameter with uniform noise in `[-a, a]`, gains with
/// `1 + noise`, so no value sits at a special point.
pub fn randomize<R: Rng>(store: &mut ParamStore<f64>, a: f64, rng: &mut R) {
    let names = store.names().to_vec();
    for (name, v) in names.iter().zip(store.values_mut()) {
        let mut t = uniform(v.shape(), -a, a, rng);
        if name.ends_with("gain") {
            t = t.map(|x| x + 1.0);
        }
        *v = t;
    }
}

/// Reverse-mode gradient of a scalar `f` over every store parameter.
pub fn store_reverse(store: &ParamStore<f64>, f: &dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var>) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, true).unwrap();
    let out = f(&mut g, &b).unwrap();
    g.backward(out).unwrap();
    b.vars()
        .iter()
        .zip(store.values())
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Relative error of [`store_reverse`] against the five-point oracle.
pub fn store_grad_error(
    store: &ParamStore<f64>,
    f: &dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
    h: f64,
) -> f64 {
    let analytic = store_reverse(store, f);
    let value = |ps: &[Tensor<f64>]| {
        let mut s = store.clone();
        s.set_values(ps.to_vec()).unwrap();
        let mut g = Graph::new();
        let b = s.bind(&mut g, false).unwrap();
        let out = f(&mut g, &b).unwrap();
        g.value(out).item()
    };
    let numeric = numeric_grad(&value, store.values(), h);
    max_rel(&analytic, &numeric)
}

/// A separable cohort of `4 x 8 x 8 x 1` clips.
pub fn small_cohort(n_mci: usize, n_nc: usize, rho: f64, seed: u64) -> mcvivit::data::Cohort {
    let spec = mcvivit::data::CohortSpec {
        n_mci,
        n_nc,
        frames_min: 12,
        frames_max: 24,
        clip_len: 4,
        hw: 8,
        channels: 1,
        rho,
        seed,
        ..mcvivit::data::CohortSpec::default()
    };
    mcvivit::data::generate_synthetic_cohort(&spec).unwrap()
}

/// A one-layer model matching [`small_cohort`] clips.
pub fn small_model(head: mcvivit::model::HeadKind) -> mcvivit::model::ModelConfig {
    use mcvivit::model::{EncoderConfig, ModelConfig, TubeletConfig};
    ModelConfig {
        clip_len: 4,
        height: 8,
        width: 8,
        channels: 1,
        tubelet: TubeletConfig { t: 2, h: 4, w: 4, d: 16 },
        encoder: EncoderConfig {
            d: 16,
            heads: 2,
            n_sp: 1,
            n_tp: 1,
            mlp_hidden: 32,
            ..EncoderConfig::default()
        },
        head,
        init_std: 0.02,
    }
}

pub fn small_train(seed: u64, max_steps: usize) -> mcvivit::train::TrainConfig {
    mcvivit::train::TrainConfig {
        batch_size: 8,
        epochs: 100,
        max_steps,
        max_lr: 1e-3,
        cycle_len: 2 * max_steps.max(1),
        seed,
        ..mcvivit::train::TrainConfig::default()
    }
}
