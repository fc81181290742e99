//! Brute-force lower bounds on `max c^T phi(x) + d` over the input box.
//!
//! The forward pass here is a separate straight-line `f64` implementation
//! that reads layer descriptions and raw weights directly, so a bug in the
//! graph-based forward or the bound code cannot hide itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::ClipRange;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkSpec, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Best objective found: a lower bound on the true maximum.
    pub value: f64,
    pub witness: Vec<f64>,
    pub evaluated: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates the network on one flat input.
pub fn reference_forward(net: &NetworkSpec, params: &ParamStore<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut shape = net.input_shape.clone();
    let mut a = x.to_vec();
    if a.len() != shape.iter().product::<usize>() {
        return Err(Error::InvalidArgument("input length does not match network".into()));
    }
    for (k, layer) in net.layers.iter().enumerate() {
        let weight = |suffix: &str| params.get(&format!("layer{k}.{suffix}")).map(|t| t.data().to_vec());
        match layer {
            LayerSpec::Affine { out_dim } => {
                let w = weight("weight")?;
                let b = weight("bias")?;
                let n = a.len();
                let mut out = vec![0.0; *out_dim];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = b[i];
                    for j in 0..n {
                        s += w[i * n + j] * a[j];
                    }
                    *o = s;
                }
                a = out;
                shape = vec![*out_dim];
            }
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let w = weight("weight")?;
                let b = weight("bias")?;
                let (c_in, h, wd) = (shape[0], shape[1], shape[2]);
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (wd + 2 * padding - kernel) / stride + 1;
                let mut out = vec![0.0; out_channels * oh * ow];
                for o in 0..*out_channels {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut s = b[o];
                            for ci in 0..c_in {
                                for ki in 0..*kernel {
                                    for kj in 0..*kernel {
                                        let ir = (r * stride + ki) as isize - *padding as isize;
                                        let ic = (c * stride + kj) as isize - *padding as isize;
                                        if ir < 0 || ic < 0 || ir >= h as isize || ic >= wd as isize {
                                            continue;
                                        }
                                        let wv = w[((o * c_in + ci) * kernel + ki) * kernel + kj];
                                        s += wv * a[(ci * h + ir as usize) * wd + ic as usize];
                                    }
                                }
                            }
                            out[(o * oh + r) * ow + c] = s;
                        }
                    }
                }
                a = out;
                shape = vec![*out_channels, oh, ow];
            }
            LayerSpec::Elementwise { nonlin } => {
                let f: fn(f64) -> f64 = match nonlin.name() {
                    "relu" => |v| v.max(0.0),
                    "sigmoid" => sigmoid,
                    _ => f64::tanh,
                };
                for v in a.iter_mut() {
                    *v = f(*v);
                }
            }
        }
    }
    Ok(a)
}

fn objective(net: &NetworkSpec, params: &ParamStore<f64>, c: &[f64], d: f64, x: &[f64]) -> Result<f64> {
    let z = reference_forward(net, params, x)?;
    if z.len() != c.len() {
        return Err(Error::InvalidArgument("spec length does not match logits".into()));
    }
    Ok(z.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() + d)
}

fn input_box(x_nom: &[f64], eps: f64, clip: ClipRange) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = clip.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    (
        x_nom.iter().map(|v| (v - eps).max(lo)).collect(),
        x_nom.iter().map(|v| (v + eps).min(hi)).collect(),
    )
}

struct Best {
    value: f64,
    witness: Vec<f64>,
    evaluated: usize,
}

impl Best {
    fn new() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            witness: Vec::new(),
            evaluated: 0,
        }
    }

    fn offer(&mut self, v: f64, x: &[f64]) {
        self.evaluated += 1;
        if v > self.value {
            self.value = v;
            self.witness = x.to_vec();
        }
    }

    fn finish(self) -> OracleResult {
        OracleResult {
            value: self.value,
            witness: self.witness,
            evaluated: self.evaluated,
        }
    }
}

pub const MAX_GRID_DIM: usize = 3;
pub const MAX_CORNER_DIM: usize = 12;

/// Maximum over a `resolution^dim` grid of the box (endpoints included).
/// Only for inputs of dimension at most 3.
#[allow(clippy::too_many_arguments)]
pub fn grid_max(
    net: &NetworkSpec,
    params: &ParamStore<f64>,
    x_nom: &[f64],
    eps: f64,
    clip: ClipRange,
    c: &[f64],
    d: f64,
    resolution: usize,
) -> Result<OracleResult> {
    let dim = x_nom.len();
    if dim > MAX_GRID_DIM {
        return Err(Error::InvalidArgument(format!(
            "grid mode supports input dimension <= {MAX_GRID_DIM}, got {dim}"
        )));
    }
    let (l, u) = input_box(x_nom, eps, clip);
    let res = resolution.max(2);
    let mut best = Best::new();
    let mut x = vec![0.0; dim];
    let total = res.pow(dim as u32);
    for flat in 0..total {
        let mut rem = flat;
        for j in 0..dim {
            let i = rem % res;
            rem /= res;
            x[j] = if i + 1 == res { u[j] } else { l[j] + (u[j] - l[j]) * i as f64 / (res - 1) as f64 };
        }
        best.offer(objective(net, params, c, d, &x)?, &x);
    }
    Ok(best.finish())
}

/// Maximum over every box corner (when `dim <= 12`), `n_samples` uniform
/// points, the nominal point, and any `extra` candidates (clamped into the
/// box first, so they stay feasible).
#[allow(clippy::too_many_arguments)]
pub fn corner_and_random_max(
    net: &NetworkSpec,
    params: &ParamStore<f64>,
    x_nom: &[f64],
    eps: f64,
    clip: ClipRange,
    c: &[f64],
    d: f64,
    n_samples: usize,
    extra: &[Vec<f64>],
    seed: u64,
) -> Result<OracleResult> {
    let dim = x_nom.len();
    let (l, u) = input_box(x_nom, eps, clip);
    let mut best = Best::new();
    let clamp_nom: Vec<f64> = x_nom.iter().zip(l.iter().zip(&u)).map(|(v, (a, b))| v.max(*a).min(*b)).collect();
    best.offer(objective(net, params, c, d, &clamp_nom)?, &clamp_nom);
    if dim <= MAX_CORNER_DIM {
        let mut x = vec![0.0; dim];
        for mask in 0u32..(1u32 << dim) {
            for j in 0..dim {
                x[j] = if mask >> j & 1 == 1 { u[j] } else { l[j] };
            }
            best.offer(objective(net, params, c, d, &x)?, &x);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; dim];
    for _ in 0..n_samples {
        for j in 0..dim {
            x[j] = if u[j] > l[j] { rng.gen_range(l[j]..=u[j]) } else { l[j] };
        }
        best.offer(objective(net, params, c, d, &x)?, &x);
    }
    for cand in extra {
        if cand.len() != dim {
            return Err(Error::InvalidArgument("candidate has wrong dimension".into()));
        }
        let x: Vec<f64> = cand.iter().zip(l.iter().zip(&u)).map(|(v, (a, b))| v.max(*a).min(*b)).collect();
        best.offer(objective(net, params, c, d, &x)?, &x);
    }
    Ok(best.finish())
}
