//! Random tiny instances shared by the property and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vericert::bounds::{interval_bounds, ClipRange, Parametrization};
use vericert::dual::{dual_bound, DualVariables, LinearSpec};
use vericert::network::{LayerSpec, NetworkSpec, ParamStore};
use vericert::nonlin::Nonlinearity;
use vericert::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const NONLINS: [Nonlinearity; 3] = [Nonlinearity::Relu, Nonlinearity::Sigmoid, Nonlinearity::Tanh];

/// Uniform entries in `[-scale, scale]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Random parameters for `net`: weights in `[-1, 1]`, biases in `[-0.5, 0.5]`.
pub fn random_params(rng: &mut impl Rng, net: &NetworkSpec) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (name, shape) in net.param_shapes().unwrap() {
        let scale = if name.ends_with("bias") { 0.5 } else { 1.0 };
        p.insert(name, uniform(rng, &shape, scale));
    }
    p
}

/// Input dimension 1 to 3, one or two hidden layers of width at most 8
/// with independently drawn nonlinearities, two or three classes.
pub fn tiny_net(rng: &mut impl Rng) -> (NetworkSpec, ParamStore<f64>) {
    let dim = rng.gen_range(1..=3);
    let depth = rng.gen_range(1..=2);
    let mut layers = Vec::new();
    for _ in 0..depth {
        layers.push(LayerSpec::Affine {
            out_dim: rng.gen_range(1..=8),
        });
        layers.push(LayerSpec::Elementwise {
            nonlin: NONLINS[rng.gen_range(0..3)],
        });
    }
    let classes = rng.gen_range(2..=3);
    layers.push(LayerSpec::Affine { out_dim: classes });
    let net = NetworkSpec {
        input_shape: vec![dim],
        layers,
        classes,
    };
    let params = random_params(rng, &net);
    (net, params)
}

/// A `[1, dim...]` point in `[0, 1]`.
pub fn random_input(rng: &mut impl Rng, net: &NetworkSpec) -> Tensor<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(&net.input_shape);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Duals for one example with entries in `[-scale, scale]`.
pub fn random_duals(rng: &mut impl Rng, net: &NetworkSpec, scale: f64) -> DualVariables<f64> {
    let (_, shapes) = net.resolve().unwrap();
    let mut lam = DualVariables::zeros(&shapes, 1);
    for t in &mut lam.lambdas {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
    lam
}

/// `(label, target, spec)` with `target != label`.
pub fn random_spec(rng: &mut impl Rng, classes: usize) -> (usize, usize, LinearSpec) {
    let label = rng.gen_range(0..classes);
    let mut target = rng.gen_range(0..classes - 1);
    if target >= label {
        target += 1;
    }
    (label, target, LinearSpec::robustness(label, target, classes))
}

pub fn zeta(
    net: &NetworkSpec,
    params: &ParamStore<f64>,
    x: &Tensor<f64>,
    eps: f64,
    clip: ClipRange,
    spec: &LinearSpec,
    lam: &DualVariables<f64>,
) -> f64 {
    let bounds = interval_bounds(net, params, x, eps, clip, Parametrization::CenterRadius).unwrap();
    dual_bound(net, params, x, eps, spec, &bounds, lam).unwrap().bound
}

/// Grid points per axis giving a few tens of thousands of evaluations.
pub fn grid_resolution(dim: usize) -> usize {
    match dim {
        1 => 4001,
        2 => 151,
        _ => 31,
    }
}
