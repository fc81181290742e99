//! Layered feedforward predictors.
//!
//! Every layer kind maps onto one of two transfer-function families: affine
//! maps (dense and convolutional) and componentwise monotone
//! nonlinearities. Interval propagation and the dual conjugate solver
//! dispatch on exactly these two families, so adding a layer kind means
//! extending [`Transfer`] and the compiler enforces the rest.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::nonlin::Nonlinearity;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        out_dim: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Elementwise {
        nonlin: Nonlinearity,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-example input shape, e.g. `[2]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

/// A layer with its input/output geometry worked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResolvedLayer {
    Dense { in_dim: usize, out_dim: usize },
    Conv(ConvGeometry),
    Elementwise(Nonlinearity),
}

impl ResolvedLayer {
    pub fn is_affine(&self) -> bool {
        !matches!(self, ResolvedLayer::Elementwise(_))
    }
}

impl NetworkSpec {
    /// Number of layers `K`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Validates the chain and returns each layer's geometry together with
    /// the per-example activation shapes `x_0 ... x_K`.
    pub fn resolve(&self) -> Result<(Vec<ResolvedLayer>, Vec<Vec<usize>>)> {
        if self.layers.is_empty() {
            return Err(Error::Network("network needs at least one layer".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Network(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        let mut resolved = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("nonempty").clone();
            let in_dim: usize = cur.iter().product();
            let (r, next) = match *layer {
                LayerSpec::Affine { out_dim } => {
                    if out_dim == 0 {
                        return Err(Error::Network(format!("layer {k}: zero output dim")));
                    }
                    (ResolvedLayer::Dense { in_dim, out_dim }, vec![out_dim])
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(Error::Network(format!(
                            "layer {k}: conv needs a [C, H, W] input, got {cur:?}"
                        )));
                    }
                    let geom = ConvGeometry {
                        in_channels: cur[0],
                        in_h: cur[1],
                        in_w: cur[2],
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    };
                    if !geom.is_valid() || out_channels == 0 {
                        return Err(Error::Network(format!("layer {k}: invalid conv geometry {geom:?}")));
                    }
                    let next = vec![out_channels, geom.out_h(), geom.out_w()];
                    (ResolvedLayer::Conv(geom), next)
                }
                LayerSpec::Elementwise { nonlin } => (ResolvedLayer::Elementwise(nonlin), cur),
            };
            resolved.push(r);
            shapes.push(next);
        }
        if !resolved.last().expect("nonempty").is_affine() {
            return Err(Error::Network("final layer must be affine (logits, no trailing nonlinearity)".into()));
        }
        let out: usize = shapes.last().expect("nonempty").iter().product();
        if out != self.classes {
            return Err(Error::Network(format!(
                "final layer has {out} outputs but the network declares {} classes",
                self.classes
            )));
        }
        Ok((resolved, shapes))
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Expected parameter names and shapes, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (layers, _) = self.resolve()?;
        let mut out = Vec::new();
        for (k, layer) in layers.iter().enumerate() {
            match layer {
                ResolvedLayer::Dense { in_dim, out_dim } => {
                    out.push((weight_name(k), vec![*out_dim, *in_dim]));
                    out.push((bias_name(k), vec![*out_dim]));
                }
                ResolvedLayer::Conv(geom) => {
                    out.push((weight_name(k), geom.weight_shape().to_vec()));
                    out.push((bias_name(k), vec![geom.out_channels]));
                }
                ResolvedLayer::Elementwise(_) => {}
            }
        }
        Ok(out)
    }

    /// Fully connected network with the given hidden widths.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], classes: usize, nonlin: Nonlinearity) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Affine { out_dim: h });
            layers.push(LayerSpec::Elementwise { nonlin });
        }
        layers.push(LayerSpec::Affine { out_dim: classes });
        Self {
            input_shape,
            layers,
            classes,
        }
    }

    /// input -> 100 -> 100 -> classes with ReLU.
    pub fn small_mlp(input_shape: Vec<usize>, classes: usize) -> Self {
        Self::mlp(input_shape, &[100, 100], classes, Nonlinearity::Relu)
    }

    /// Two conv layers (16 channels stride 1, 32 channels stride 2, 4x4
    /// kernels, padding 1), then 100 hidden units and the logits.
    pub fn small_conv(input_shape: Vec<usize>, classes: usize) -> Self {
        let relu = LayerSpec::Elementwise {
            nonlin: Nonlinearity::Relu,
        };
        Self {
            input_shape,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 4,
                    stride: 1,
                    padding: 1,
                },
                relu.clone(),
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                relu.clone(),
                LayerSpec::Affine { out_dim: 100 },
                relu,
                LayerSpec::Affine { out_dim: classes },
            ],
            classes,
        }
    }

    /// Resolves an architecture name: `small-mlp`, `small-conv`, or
    /// `mlp:H1,H2,...[:relu|sigmoid|tanh]`.
    pub fn by_name(name: &str, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let spec = match name {
            "small-mlp" => Self::small_mlp(input_shape, classes),
            "small-conv" => Self::small_conv(input_shape, classes),
            other => {
                let rest = other
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{other}'")))?;
                let mut parts = rest.split(':');
                let widths = parts.next().unwrap_or("");
                let nonlin = match parts.next() {
                    Some(s) => s.parse().map_err(Error::InvalidArgument)?,
                    None => Nonlinearity::Relu,
                };
                let hidden = if widths.is_empty() {
                    vec![]
                } else {
                    widths
                        .split(',')
                        .map(|w| {
                            w.trim()
                                .parse::<usize>()
                                .map_err(|_| Error::InvalidArgument(format!("bad width '{w}' in '{other}'")))
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                Self::mlp(input_shape, &hidden, classes, nonlin)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn weight_name(k: usize) -> String {
    format!("layer{k}.weight")
}

pub fn bias_name(k: usize) -> String {
    format!("layer{k}.bias")
}

/// Named trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Network(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges `other` under `prefix` (e.g. `"verifier/"`).
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// Entries without the given prefix.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if !k.starts_with(prefix) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks names and shapes against the network.
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        for (name, shape) in net.param_shapes()? {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("param_store", t.shape(), &shape));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(-a, a)` with `a = sqrt(6 / fan_in)`, so `Var = 2 / fan_in`.
    #[default]
    HeUniform,
    /// `U(-a, a)` with `a = sqrt(3 / fan_in)`, so `Var = 1 / fan_in`.
    LecunUniform,
}

/// Deterministic fan-in scaled initialisation with zero biases.
pub fn init_params<T: Real>(net: &NetworkSpec, seed: u64, scheme: InitScheme) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in net.param_shapes()? {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let gain = match scheme {
                InitScheme::HeUniform => 6.0,
                InitScheme::LecunUniform => 3.0,
            };
            let a = (gain / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.gen_range(-a..=a))).collect();
            Tensor::new(shape, data)?
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Layer `k` bound onto a graph.
#[derive(Clone, Debug)]
pub enum Transfer {
    Dense {
        w: Var,
        b: Var,
        in_shape: Vec<usize>,
    },
    Conv {
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Elementwise(Nonlinearity),
}

impl Transfer {
    pub fn is_affine(&self) -> bool {
        !matches!(self, Transfer::Elementwise(_))
    }

    fn batched(shape: &[usize], batch: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(shape.len() + 1);
        s.push(batch);
        s.extend_from_slice(shape);
        s
    }

    /// The full transfer function `h_k(x)`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Transfer::Elementwise(nl) => match nl {
                Nonlinearity::Relu => g.relu(x),
                Nonlinearity::Sigmoid => g.sigmoid(x),
                Nonlinearity::Tanh => g.tanh(x),
            },
            Transfer::Dense { b, .. } | Transfer::Conv { b, .. } => {
                let y = self.apply_linear(g, x)?;
                g.add_bias(y, *b)
            }
        }
    }

    /// Linear part `W x` of an affine layer.
    pub fn apply_linear<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Transfer::Dense { w, .. } => {
                let flat = g.flatten(x)?;
                g.matmul_t(flat, *w, false, true)
            }
            Transfer::Conv { w, geom, .. } => g.conv2d(x, *w, *geom),
            Transfer::Elementwise(_) => Err(Error::Network("apply_linear on a nonlinearity".into())),
        }
    }

    /// `|W| r` for a radius `r`.
    pub fn apply_abs<T: Real>(&self, g: &mut Graph<T>, r: Var) -> Result<Var> {
        match self {
            Transfer::Dense { w, .. } => {
                let aw = g.abs(*w)?;
                let flat = g.flatten(r)?;
                g.matmul_t(flat, aw, false, true)
            }
            Transfer::Conv { w, geom, .. } => {
                let aw = g.abs(*w)?;
                g.conv2d(r, aw, *geom)
            }
            Transfer::Elementwise(_) => Err(Error::Network("apply_abs on a nonlinearity".into())),
        }
    }

    /// `W^T lam`, shaped like the layer input.
    pub fn apply_transpose<T: Real>(&self, g: &mut Graph<T>, lam: Var) -> Result<Var> {
        match self {
            Transfer::Dense { w, in_shape, .. } => {
                let batch = g.value(lam).rows();
                let flat = g.flatten(lam)?;
                let y = g.matmul(flat, *w)?;
                g.reshape(y, &Self::batched(in_shape, batch))
            }
            Transfer::Conv { w, geom, .. } => g.conv2d_transpose(lam, *w, *geom),
            Transfer::Elementwise(_) => Err(Error::Network("apply_transpose on a nonlinearity".into())),
        }
    }

    /// Row-wise `lam^T b`.
    pub fn bias_dot<T: Real>(&self, g: &mut Graph<T>, lam: Var) -> Result<Var> {
        match self {
            Transfer::Dense { b, .. } => {
                let flat = g.flatten(lam)?;
                g.bias_dot(flat, *b)
            }
            Transfer::Conv { b, .. } => g.bias_dot(lam, *b),
            Transfer::Elementwise(_) => Err(Error::Network("bias_dot on a nonlinearity".into())),
        }
    }

    pub fn bias(&self) -> Option<Var> {
        match self {
            Transfer::Dense { b, .. } | Transfer::Conv { b, .. } => Some(*b),
            Transfer::Elementwise(_) => None,
        }
    }
}

/// A network whose parameters live on a graph.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub layers: Vec<Transfer>,
    /// Parameter name to graph leaf.
    pub params: Vec<(String, Var)>,
    /// Per-example activation shapes `x_0 ... x_K`.
    pub shapes: Vec<Vec<usize>>,
}

impl BoundNetwork {
    /// Places `params` on `g`, as trainable leaves when `trainable`.
    pub fn bind<T: Real>(g: &mut Graph<T>, net: &NetworkSpec, params: &ParamStore<T>, trainable: bool) -> Result<Self> {
        let (resolved, shapes) = net.resolve()?;
        params.check(net)?;
        let mut layers = Vec::with_capacity(resolved.len());
        let mut bound = Vec::new();
        let mut leaf = |g: &mut Graph<T>, name: String| -> Result<Var> {
            let t = params.get(&name)?.clone();
            let v = if trainable { g.param(t) } else { g.constant(t) };
            bound.push((name, v));
            Ok(v)
        };
        for (k, layer) in resolved.iter().enumerate() {
            layers.push(match layer {
                ResolvedLayer::Dense { .. } => Transfer::Dense {
                    w: leaf(g, weight_name(k))?,
                    b: leaf(g, bias_name(k))?,
                    in_shape: shapes[k].clone(),
                },
                ResolvedLayer::Conv(geom) => Transfer::Conv {
                    w: leaf(g, weight_name(k))?,
                    b: leaf(g, bias_name(k))?,
                    geom: *geom,
                },
                ResolvedLayer::Elementwise(nl) => Transfer::Elementwise(*nl),
            });
        }
        Ok(Self {
            layers,
            params: bound,
            shapes,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Checks that `x0` is `[B, input_shape...]`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.shapes[0].len() + 1 || shape[1..] != self.shapes[0][..] {
            return Err(Error::shape("forward", shape, &self.shapes[0]));
        }
        Ok(())
    }

    /// Records the forward pass and returns `x_0 ... x_K`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x0: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(x0))?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x0);
        for layer in &self.layers {
            let x = *trace.last().expect("nonempty");
            trace.push(layer.apply(g, x)?);
        }
        Ok(trace)
    }
}

/// Activations `x_0 ... x_K` of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    pub activations: Vec<Tensor<T>>,
}

impl<T: Real> ActivationTrace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.activations.last().expect("trace is never empty")
    }
}

/// Plain forward pass over a batch `[B, input_shape...]`.
pub fn forward<T: Real>(net: &NetworkSpec, params: &ParamStore<T>, x0: &Tensor<T>) -> Result<ActivationTrace<T>> {
    let mut g = Graph::new();
    let bound = BoundNetwork::bind(&mut g, net, params, false)?;
    let x = g.constant(x0.clone());
    let trace = bound.forward(&mut g, x)?;
    Ok(ActivationTrace {
        activations: trace.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Index of the largest logit per row; ties pick the lowest index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Strictly correct: the true logit beats every other logit.
pub fn is_correct<T: Real>(logits_row: &[T], label: usize) -> bool {
    logits_row
        .iter()
        .enumerate()
        .all(|(j, &v)| j == label || v < logits_row[label])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_1d(w: f64, b: f64) -> (NetworkSpec, ParamStore<f64>) {
        let net = NetworkSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Affine { out_dim: 1 }],
            classes: 1,
        };
        let mut p = ParamStore::new();
        p.insert(weight_name(0), Tensor::from_f64([1, 1], &[w]).unwrap());
        p.insert(bias_name(0), Tensor::from_f64([1], &[b]).unwrap());
        (net, p)
    }

    #[test]
    fn single_affine_trace() {
        let (net, p) = affine_1d(2.0, 1.0);
        let x = Tensor::from_f64([1, 1], &[1.0]).unwrap();
        let tr = forward(&net, &p, &x).unwrap();
        assert_eq!(tr.activations.len(), 2);
        assert_eq!(tr.activations[0].data(), &[1.0]);
        assert_eq!(tr.activations[1].data(), &[3.0]);
    }

    #[test]
    fn identity_affine_relu() {
        let net = NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Affine { out_dim: 2 },
                LayerSpec::Elementwise {
                    nonlin: Nonlinearity::Relu,
                },
                LayerSpec::Affine { out_dim: 2 },
            ],
            classes: 2,
        };
        let mut p = ParamStore::<f64>::new();
        let eye = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        for k in [0, 2] {
            p.insert(weight_name(k), eye.clone());
            p.insert(bias_name(k), Tensor::zeros(vec![2]));
        }
        let x = Tensor::from_f64([1, 2], &[-1.0, 1.0]).unwrap();
        let tr = forward(&net, &p, &x).unwrap();
        assert_eq!(tr.activations[2].data(), &[0.0, 1.0]);
        assert_eq!(tr.logits().data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_trailing_nonlinearity_and_bad_class_count() {
        let mut net = NetworkSpec::mlp(vec![2], &[3], 2, Nonlinearity::Relu);
        net.layers.push(LayerSpec::Elementwise {
            nonlin: Nonlinearity::Relu,
        });
        assert!(net.validate().is_err());
        let mut net = NetworkSpec::mlp(vec![2], &[3], 2, Nonlinearity::Relu);
        net.classes = 3;
        assert!(net.validate().is_err());
        let empty = NetworkSpec {
            input_shape: vec![2],
            layers: vec![],
            classes: 2,
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn shape_mismatch_on_forward() {
        let (net, p) = affine_1d(1.0, 0.0);
        let x = Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap();
        assert!(forward(&net, &p, &x).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let net = NetworkSpec::small_mlp(vec![4], 3);
        let a = init_params::<f64>(&net, 7, InitScheme::HeUniform).unwrap();
        let b = init_params::<f64>(&net, 7, InitScheme::HeUniform).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f64>(&net, 8, InitScheme::HeUniform).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn he_variance() {
        // 100 x 100 weights = 10^4 samples
        let net = NetworkSpec::mlp(vec![100], &[], 100, Nonlinearity::Relu);
        let p = init_params::<f64>(&net, 3, InitScheme::HeUniform).unwrap();
        let w = p.get(&weight_name(0)).unwrap();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() <= 0.2 * target, "var {var} vs {target}");
    }

    #[test]
    fn architecture_names() {
        let conv = NetworkSpec::by_name("small-conv", vec![1, 28, 28], 10).unwrap();
        let (_, shapes) = conv.resolve().unwrap();
        assert_eq!(shapes[1], vec![16, 27, 27]);
        assert_eq!(shapes[3], vec![32, 13, 13]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        let m = NetworkSpec::by_name("mlp:8,4:tanh", vec![2], 2).unwrap();
        assert_eq!(m.depth(), 5);
        assert!(NetworkSpec::by_name("resnet", vec![2], 2).is_err());
    }

    #[test]
    fn correctness_is_strict() {
        assert!(is_correct(&[0.0f64, 1.0], 1));
        assert!(!is_correct(&[1.0f64, 1.0], 1));
        assert_eq!(predict(&Tensor::<f64>::from_f64([1, 2], &[1.0, 1.0]).unwrap()), vec![0]);
    }
}
