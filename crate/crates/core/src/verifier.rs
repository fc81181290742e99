//! Verifier networks that map an activation trace and label to dual
//! variables.
//!
//! Every architecture ends each dual-emitting branch in a zero-initialised
//! linear layer, so an untrained verifier emits `lambda = 0` and reproduces
//! the plain interval bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifierKind {
    /// Always `lambda = 0`; no parameters.
    Constant,
    /// One independent MLP per layer on `(x_k, y)`.
    Direct,
    /// A backward pass over the activations followed by a forward pass
    /// emitting `lambda_0 ... lambda_{K-1}` in order.
    BackwardForward,
}

impl std::str::FromStr for VerifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "direct" => Ok(Self::Direct),
            "backward-forward" | "bf" => Ok(Self::BackwardForward),
            other => Err(Error::InvalidArgument(format!("unknown verifier kind {other:?}"))),
        }
    }
}

impl VerifierKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Direct => "direct",
            Self::BackwardForward => "backward-forward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub kind: VerifierKind,
    pub hidden: usize,
    /// Also condition on the target class and emit one set of duals per
    /// (example, target) pair.
    #[serde(default)]
    pub per_target: bool,
}

impl VerifierSpec {
    pub fn new(kind: VerifierKind) -> Self {
        Self {
            kind,
            hidden: 200,
            per_target: false,
        }
    }

    /// Width of the label encoding fed to the sub-networks.
    fn label_dim(&self, classes: usize) -> usize {
        if self.per_target {
            2 * classes
        } else {
            classes
        }
    }

    /// `(name, [out, in])` for every weight, in a fixed order; each weight
    /// has a matching `[out]` bias.
    pub fn layer_shapes(&self, net: &NetworkSpec) -> Result<Vec<(String, usize, usize)>> {
        let (_, shapes) = net.resolve()?;
        let dims: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        let depth = dims.len() - 1;
        let ydim = self.label_dim(net.classes);
        let h = self.hidden;
        let mut out = Vec::new();
        match self.kind {
            VerifierKind::Constant => {}
            VerifierKind::Direct => {
                for k in 0..depth {
                    out.push((format!("direct{k}.hidden"), h, dims[k] + ydim));
                    out.push((format!("direct{k}.out"), dims[k + 1], h));
                }
            }
            VerifierKind::BackwardForward => {
                for k in (0..depth).rev() {
                    let input = if k == depth - 1 { dims[depth] + ydim } else { h + dims[k + 1] };
                    out.push((format!("backward{k}"), h, input));
                }
                for k in 0..depth {
                    let input = if k == 0 { h + dims[0] } else { dims[k] + h };
                    out.push((format!("forward{k}.hidden"), h, input));
                    out.push((format!("forward{k}.out"), dims[k + 1], h));
                }
            }
        }
        Ok(out)
    }
}

/// A verifier specification with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifierNet<T> {
    pub spec: VerifierSpec,
    pub params: ParamStore<T>,
}

impl<T: Real> VerifierNet<T> {
    /// He-uniform hidden layers, zero output layers, zero biases.
    pub fn init(spec: VerifierSpec, net: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, out, inp) in spec.layer_shapes(net)? {
            let w = if name.ends_with(".out") {
                Tensor::zeros(vec![out, inp])
            } else {
                let a = (6.0 / inp as f64).sqrt();
                let data = (0..out * inp).map(|_| T::of(rng.gen_range(-a..=a))).collect();
                Tensor::new(vec![out, inp], data)?
            };
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![out]));
        }
        Ok(Self { spec, params })
    }

    pub fn constant() -> Self {
        Self {
            spec: VerifierSpec::new(VerifierKind::Constant),
            params: ParamStore::new(),
        }
    }

    /// Checks parameter names and shapes against `net`.
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        let expected = self.spec.layer_shapes(net)?;
        if self.params.len() != 2 * expected.len() {
            return Err(Error::Network(format!(
                "verifier has {} tensors, expected {}",
                self.params.len(),
                2 * expected.len()
            )));
        }
        for (name, out, inp) in expected {
            let w = self.params.get(&format!("{name}.weight"))?;
            let b = self.params.get(&format!("{name}.bias"))?;
            if w.shape() != [out, inp] || b.shape() != [out] {
                return Err(Error::Network(format!(
                    "verifier layer {name} has shapes {:?}/{:?}, expected [{out}, {inp}]/[{out}]",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places the parameters on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundVerifier {
        let params = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        BoundVerifier {
            spec: self.spec.clone(),
            params,
        }
    }

    /// Predicts duals with constant parameters. See [`BoundVerifier::predict`].
    pub fn predict(
        &self,
        g: &mut Graph<T>,
        shapes: &[Vec<usize>],
        trace: &[Var],
        labels: &[usize],
        targets: Option<&[usize]>,
    ) -> Result<Vec<Var>> {
        self.bind(g, false).predict(g, shapes, trace, labels, targets)
    }
}

/// Verifier parameters living on a graph.
#[derive(Clone, Debug)]
pub struct BoundVerifier {
    pub spec: VerifierSpec,
    pub params: Vec<(String, Var)>,
}

impl BoundVerifier {
    fn param(&self, name: &str) -> Result<Var> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Network(format!("missing verifier parameter {name}")))
    }

    fn dense<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = g.matmul_t(x, w, false, true)?;
        g.add_bias(y, b)
    }

    fn hidden<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let y = self.dense(g, name, x)?;
        g.relu(y)
    }

    /// `lambda_0 ... lambda_{K-1}`, each `[B, shape of x_{k+1}]`, from the
    /// trace `x_0 ... x_K` and labels. With `per_target`, `targets` gives one
    /// target class per row.
    pub fn predict<T: Real>(
        &self,
        g: &mut Graph<T>,
        shapes: &[Vec<usize>],
        trace: &[Var],
        labels: &[usize],
        targets: Option<&[usize]>,
    ) -> Result<Vec<Var>> {
        if trace.len() != shapes.len() {
            return Err(Error::Inconsistent(format!(
                "trace has {} activations for {} shapes",
                trace.len(),
                shapes.len()
            )));
        }
        let batch = labels.len();
        for (&x, s) in trace.iter().zip(shapes) {
            if g.shape(x).first() != Some(&batch) || g.shape(x)[1..] != s[..] {
                return Err(Error::shape("verifier input", g.shape(x), &[&[batch][..], s].concat()));
            }
        }
        let depth = shapes.len() - 1;
        let classes = shapes[depth].iter().product::<usize>();
        let out_shape = |k: usize| [&[batch][..], &shapes[k + 1][..]].concat();
        if self.spec.kind == VerifierKind::Constant {
            return Ok((0..depth).map(|k| g.constant(Tensor::zeros(out_shape(k)))).collect());
        }
        let ydim = self.spec.label_dim(classes);
        let mut onehot = vec![T::zero(); batch * ydim];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::InvalidArgument(format!("label {y} out of range")));
            }
            onehot[i * ydim + y] = T::one();
        }
        match (self.spec.per_target, targets) {
            (true, Some(ts)) if ts.len() == batch => {
                for (i, &t) in ts.iter().enumerate() {
                    if t >= classes {
                        return Err(Error::InvalidArgument(format!("target {t} out of range")));
                    }
                    onehot[i * ydim + classes + t] = T::one();
                }
            }
            (true, _) => return Err(Error::InvalidArgument("per-target verifier needs one target per row".into())),
            (false, _) => {}
        }
        let y = g.constant(Tensor::new(vec![batch, ydim], onehot)?);
        let flat: Vec<Var> = trace.iter().map(|&x| g.flatten(x)).collect::<Result<_>>()?;

        let mut lambdas = Vec::with_capacity(depth);
        match self.spec.kind {
            VerifierKind::Constant => unreachable!(),
            VerifierKind::Direct => {
                for k in 0..depth {
                    let inp = g.concat(&[flat[k], y])?;
                    let h = self.hidden(g, &format!("direct{k}.hidden"), inp)?;
                    let lam = self.dense(g, &format!("direct{k}.out"), h)?;
                    lambdas.push(g.reshape(lam, &out_shape(k))?);
                }
            }
            VerifierKind::BackwardForward => {
                let mut eta = vec![None; depth];
                let top = g.concat(&[flat[depth], y])?;
                eta[depth - 1] = Some(self.hidden(g, &format!("backward{}", depth - 1), top)?);
                for k in (0..depth - 1).rev() {
                    let inp = g.concat(&[eta[k + 1].expect("set"), flat[k + 1]])?;
                    eta[k] = Some(self.hidden(g, &format!("backward{k}"), inp)?);
                }
                let mut prev: Option<Var> = None;
                for k in 0..depth {
                    let e = eta[k].expect("set");
                    let inp = match prev {
                        None => g.concat(&[e, flat[0]])?,
                        Some(p) => g.concat(&[p, e])?,
                    };
                    let h = self.hidden(g, &format!("forward{k}.hidden"), inp)?;
                    let lam = self.dense(g, &format!("forward{k}.out"), h)?;
                    prev = Some(lam);
                    lambdas.push(g.reshape(lam, &out_shape(k))?);
                }
            }
        }
        Ok(lambdas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, BoundNetwork, InitScheme};
    use crate::nonlin::Nonlinearity;

    fn trace_for(net: &NetworkSpec, g: &mut Graph<f64>, batch: usize) -> (BoundNetwork, Vec<Var>) {
        let p = init_params::<f64>(net, 3, InitScheme::HeUniform).unwrap();
        let bn = BoundNetwork::bind(g, net, &p, false).unwrap();
        let n: usize = net.input_shape.iter().product();
        let data: Vec<f64> = (0..batch * n).map(|i| (i % 7) as f64 / 7.0).collect();
        let x = g.constant(Tensor::new([&[batch][..], &net.input_shape[..]].concat(), data).unwrap());
        let tr = bn.forward(g, x).unwrap();
        (bn, tr)
    }

    #[test]
    fn output_shapes_match_duals() {
        let nets = [
            NetworkSpec::mlp(vec![3], &[5, 4], 2, Nonlinearity::Tanh),
            NetworkSpec::small_conv(vec![1, 8, 8], 3),
        ];
        for net in &nets {
            for kind in [VerifierKind::Constant, VerifierKind::Direct, VerifierKind::BackwardForward] {
                let mut spec = VerifierSpec::new(kind);
                spec.hidden = 7;
                let v = VerifierNet::<f64>::init(spec, net, 0).unwrap();
                v.check(net).unwrap();
                let mut g = Graph::new();
                let (bn, tr) = trace_for(net, &mut g, 2);
                let lams = v.predict(&mut g, &bn.shapes, &tr, &[0, 1], None).unwrap();
                assert_eq!(lams.len(), net.depth());
                for (k, l) in lams.iter().enumerate() {
                    assert_eq!(g.shape(*l), &[&[2][..], &bn.shapes[k + 1][..]].concat()[..]);
                    assert!(g.value(*l).data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn constant_has_no_parameters() {
        let net = NetworkSpec::mlp(vec![2], &[3], 2, Nonlinearity::Relu);
        let v = VerifierNet::<f64>::init(VerifierSpec::new(VerifierKind::Constant), &net, 0).unwrap();
        assert!(v.params.is_empty());
    }

    #[test]
    fn per_target_requires_targets() {
        let net = NetworkSpec::mlp(vec![2], &[3], 3, Nonlinearity::Relu);
        let mut spec = VerifierSpec::new(VerifierKind::Direct);
        spec.per_target = true;
        let v = VerifierNet::<f64>::init(spec, &net, 0).unwrap();
        let mut g = Graph::new();
        let (bn, tr) = trace_for(&net, &mut g, 2);
        assert!(v.predict(&mut g, &bn.shapes, &tr, &[0, 1], None).is_err());
        assert!(v.predict(&mut g, &bn.shapes, &tr, &[0, 1], Some(&[1, 2])).is_ok());
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = NetworkSpec::mlp(vec![3], &[4], 2, Nonlinearity::Sigmoid);
        let mut v = VerifierNet::<f64>::init(VerifierSpec::new(VerifierKind::BackwardForward), &net, 5).unwrap();
        for (_, t) in v.params.iter_mut() {
            *t = t.map(|x| x + 0.01);
        }
        let run = || {
            let mut g = Graph::new();
            let (bn, tr) = trace_for(&net, &mut g, 2);
            let l = v.predict(&mut g, &bn.shapes, &tr, &[1, 0], None).unwrap();
            l.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
