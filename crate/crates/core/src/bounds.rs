//! Interval bound propagation.
//!
//! Starting from the input box `{x : |x - x_nom|_inf <= eps}` (optionally
//! clipped to the valid pixel range), elementwise bounds `l_k <= x_k <= u_k`
//! are pushed through every layer. Affine layers default to the
//! centre/radius form (`c' = W c + b`, `r' = |W| r`, two products per
//! layer); monotone nonlinearities map endpoints (`h(l)`, `h(u)`). All of
//! it is recorded on the graph, so bounds are differentiable in the
//! network weights and in `x_nom`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{BoundNetwork, NetworkSpec, ParamStore, Transfer};
use crate::nonlin::Nonlinearity;
use crate::tensor::{Real, Tensor};

/// How affine layers propagate boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// `c' = W c + b`, `r' = |W| r`.
    #[default]
    CenterRadius,
    /// `l' = W+ l + W- u + b`, `u' = W+ u + W- l + b`.
    LowerUpper,
}

/// Optional clipping range for the input box.
pub type ClipRange = Option<(f64, f64)>;

/// A box on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxVars {
    pub lower: Var,
    pub upper: Var,
}

impl BoxVars {
    /// `((l + u) / 2, (u - l) / 2)`.
    pub fn center_radius<T: Real>(&self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let half = T::of(0.5);
        let s = g.add(self.lower, self.upper)?;
        let c = g.scale(s, half)?;
        let d = g.sub(self.upper, self.lower)?;
        let r = g.scale(d, half)?;
        Ok((c, r))
    }

    pub fn from_center_radius<T: Real>(g: &mut Graph<T>, c: Var, r: Var) -> Result<Self> {
        Ok(Self {
            lower: g.sub(c, r)?,
            upper: g.add(c, r)?,
        })
    }
}

/// Per-layer boxes for `x_0 ... x_K`, materialised.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBounds<T> {
    pub lower: Vec<Tensor<T>>,
    pub upper: Vec<Tensor<T>>,
    pub eps: f64,
}

impl<T: Real> IntervalBounds<T> {
    pub fn from_graph(g: &Graph<T>, boxes: &[BoxVars], eps: f64) -> Self {
        Self {
            lower: boxes.iter().map(|b| g.value(b.lower).clone()).collect(),
            upper: boxes.iter().map(|b| g.value(b.upper).clone()).collect(),
            eps,
        }
    }

    pub fn layers(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self, k: usize) -> Tensor<T> {
        self.lower[k]
            .zip_map(&self.upper[k], |l, u| (l + u) * T::of(0.5))
            .expect("bounds share shapes")
    }

    pub fn radius(&self, k: usize) -> Tensor<T> {
        self.lower[k]
            .zip_map(&self.upper[k], |l, u| (u - l) * T::of(0.5))
            .expect("bounds share shapes")
    }

    /// Places the boxes on `g` as constants.
    pub fn to_graph(&self, g: &mut Graph<T>) -> Vec<BoxVars> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| BoxVars {
                lower: g.constant(l.clone()),
                upper: g.constant(u.clone()),
            })
            .collect()
    }

    /// Restricts every layer to the given batch rows.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            lower: self.lower.iter().map(|t| t.select_rows(idx)).collect(),
            upper: self.upper.iter().map(|t| t.select_rows(idx)).collect(),
            eps: self.eps,
        }
    }

    /// Sum over layers and elements of `max(0, l - u)`; zero for valid boxes.
    pub fn inversion(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .flat_map(|(l, u)| l.data().iter().zip(u.data()).map(|(&a, &b)| (a - b).as_f64().max(0.0)))
            .sum()
    }
}

/// `l_0 = max(x_nom - eps, lo)`, `u_0 = min(x_nom + eps, hi)`.
pub fn input_box<T: Real>(g: &mut Graph<T>, x_nom: Var, eps: f64, clip: ClipRange) -> Result<BoxVars> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    let e = T::of(eps);
    let mut lower = g.add_scalar(x_nom, -e)?;
    let mut upper = g.add_scalar(x_nom, e)?;
    if let Some((lo, hi)) = clip {
        lower = g.clamp(lower, T::of(lo), T::infinity())?;
        upper = g.clamp(upper, T::neg_infinity(), T::of(hi))?;
    }
    Ok(BoxVars { lower, upper })
}

fn linear_with<T: Real>(g: &mut Graph<T>, layer: &Transfer, w: Var, x: Var) -> Result<Var> {
    match layer {
        Transfer::Dense { .. } => {
            let flat = g.flatten(x)?;
            g.matmul_t(flat, w, false, true)
        }
        Transfer::Conv { geom, .. } => g.conv2d(x, w, *geom),
        Transfer::Elementwise(_) => Err(Error::Network("affine propagation on a nonlinearity".into())),
    }
}

fn affine_weight(layer: &Transfer) -> Result<(Var, Var)> {
    match layer {
        Transfer::Dense { w, b, .. } | Transfer::Conv { w, b, .. } => Ok((*w, *b)),
        Transfer::Elementwise(_) => Err(Error::Network("affine propagation on a nonlinearity".into())),
    }
}

/// `l' = W+ l + W- u + b`, `u' = W+ u + W- l + b` (four products).
pub fn propagate_affine_lu<T: Real>(g: &mut Graph<T>, layer: &Transfer, bx: BoxVars) -> Result<BoxVars> {
    let (w, b) = affine_weight(layer)?;
    let wp = g.relu(w)?;
    let nw = g.neg(w)?;
    let rn = g.relu(nw)?;
    let wm = g.neg(rn)?;
    let pl = linear_with(g, layer, wp, bx.lower)?;
    let mu = linear_with(g, layer, wm, bx.upper)?;
    let pu = linear_with(g, layer, wp, bx.upper)?;
    let ml = linear_with(g, layer, wm, bx.lower)?;
    let lo = g.add(pl, mu)?;
    let hi = g.add(pu, ml)?;
    Ok(BoxVars {
        lower: g.add_bias(lo, b)?,
        upper: g.add_bias(hi, b)?,
    })
}

/// `c' = W c + b`, `r' = |W| r` (two products).
pub fn propagate_affine_cr<T: Real>(g: &mut Graph<T>, layer: &Transfer, c: Var, r: Var) -> Result<(Var, Var)> {
    let c2 = layer.apply(g, c)?;
    let r2 = layer.apply_abs(g, r)?;
    Ok((c2, r2))
}

/// Endpoint rule for non-decreasing componentwise nonlinearities.
pub fn propagate_monotone<T: Real>(g: &mut Graph<T>, nonlin: Nonlinearity, bx: BoxVars) -> Result<BoxVars> {
    if !nonlin.is_monotone() {
        return Err(Error::Network(format!("{} is not registered as monotone", nonlin.name())));
    }
    let layer = Transfer::Elementwise(nonlin);
    Ok(BoxVars {
        lower: layer.apply(g, bx.lower)?,
        upper: layer.apply(g, bx.upper)?,
    })
}

/// Boxes for every activation `x_0 ... x_K`.
pub fn propagate_all<T: Real>(
    g: &mut Graph<T>,
    net: &BoundNetwork,
    x_nom: Var,
    eps: f64,
    clip: ClipRange,
    param: Parametrization,
) -> Result<Vec<BoxVars>> {
    net.check_input(g.shape(x_nom))?;
    let mut boxes = vec![input_box(g, x_nom, eps, clip)?];
    for layer in &net.layers {
        let bx = *boxes.last().expect("nonempty");
        let next = match (layer, param) {
            (Transfer::Elementwise(nl), _) => propagate_monotone(g, *nl, bx)?,
            (_, Parametrization::CenterRadius) => {
                let (c, r) = bx.center_radius(g)?;
                let (c2, r2) = propagate_affine_cr(g, layer, c, r)?;
                BoxVars::from_center_radius(g, c2, r2)?
            }
            (_, Parametrization::LowerUpper) => propagate_affine_lu(g, layer, bx)?,
        };
        boxes.push(next);
    }
    Ok(boxes)
}

/// Materialised bounds for a batch of nominal inputs.
pub fn interval_bounds<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    eps: f64,
    clip: ClipRange,
    param: Parametrization,
) -> Result<IntervalBounds<T>> {
    let mut g = Graph::new();
    let bound = BoundNetwork::bind(&mut g, net, params, false)?;
    let x = g.constant(x_nom.clone());
    let boxes = propagate_all(&mut g, &bound, x, eps, clip, param)?;
    Ok(IntervalBounds::from_graph(&g, &boxes, eps))
}

fn dense_layer<T: Real>(g: &mut Graph<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Transfer> {
    if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
        return Err(Error::shape("affine bounds", w.shape(), b.shape()));
    }
    let in_shape = vec![w.shape()[1]];
    Ok(Transfer::Dense {
        w: g.constant(w.clone()),
        b: g.constant(b.clone()),
        in_shape,
    })
}

fn as_batch<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.clone().reshape(vec![1, t.len()])
}

/// Single-example (l, u) affine propagation on plain tensors.
pub fn affine_lu<T: Real>(w: &Tensor<T>, b: &Tensor<T>, l: &Tensor<T>, u: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let layer = dense_layer(&mut g, w, b)?;
    let bx = BoxVars {
        lower: g.constant(as_batch(l)?),
        upper: g.constant(as_batch(u)?),
    };
    let out = propagate_affine_lu(&mut g, &layer, bx)?;
    Ok((g.value(out.lower).clone().reshape(b.shape())?, g.value(out.upper).clone().reshape(b.shape())?))
}

/// Single-example (centre, radius) affine propagation on plain tensors.
pub fn affine_cr<T: Real>(w: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, r: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if r.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::InvalidArgument("radius must be non-negative".into()));
    }
    let mut g = Graph::new();
    let layer = dense_layer(&mut g, w, b)?;
    let (cv, rv) = (g.constant(as_batch(c)?), g.constant(as_batch(r)?));
    let (c2, r2) = propagate_affine_cr(&mut g, &layer, cv, rv)?;
    Ok((g.value(c2).clone().reshape(b.shape())?, g.value(r2).clone().reshape(b.shape())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    fn input(x: &[f64], eps: f64, clip: ClipRange) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(t(&[1, x.len()], x));
        let b = input_box(&mut g, xv, eps, clip).unwrap();
        (g.value(b.lower).to_f64_vec(), g.value(b.upper).to_f64_vec())
    }

    #[test]
    fn input_box_examples() {
        let (l, u) = input(&[0.5], 0.1, Some((0.0, 1.0)));
        assert!((l[0] - 0.4).abs() < 1e-15 && (u[0] - 0.6).abs() < 1e-15);
        let (l, u) = input(&[0.05], 0.1, Some((0.0, 1.0)));
        assert_eq!(l[0], 0.0);
        assert!((u[0] - 0.15).abs() < 1e-15);
        let (l, u) = input(&[0.3, 0.7], 0.0, None);
        assert_eq!(l, vec![0.3, 0.7]);
        assert_eq!(u, vec![0.3, 0.7]);
    }

    #[test]
    fn negative_eps_is_an_error() {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(t(&[1, 1], &[0.5]));
        assert!(input_box(&mut g, xv, -0.1, None).is_err());
    }

    #[test]
    fn affine_examples() {
        // Expected values from enumerating the four corners of the box.
        let w = t(&[2, 2], &[1.0, -1.0, 2.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let (l, u) = affine_lu(&w, &b, &t(&[2], &[0.0, -1.0]), &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(l.data(), &[-1.0, -1.0]);
        assert_eq!(u.data(), &[2.0, 3.0]);
        let (c, r) = affine_cr(&w, &b, &t(&[2], &[0.5, 0.0]), &t(&[2], &[0.5, 1.0])).unwrap();
        assert_eq!(c.data(), &[0.5, 1.0]);
        assert_eq!(r.data(), &[1.5, 2.0]);
    }

    #[test]
    fn identity_and_point_boxes() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let (l, u) = (t(&[2], &[-0.3, 0.2]), t(&[2], &[0.1, 0.9]));
        let (l2, u2) = affine_lu(&eye, &zero, &l, &u).unwrap();
        assert_eq!((l2, u2), (l.clone(), u.clone()));
        let (c2, r2) = affine_cr(&eye, &zero, &l, &u).unwrap();
        assert_eq!((c2, r2), (l, u));

        let w = t(&[2, 2], &[0.5, -2.0, 1.5, 0.25]);
        let b = t(&[2], &[0.1, -0.2]);
        let x = t(&[2], &[0.4, -0.6]);
        let wx = w.matmul(&x.clone().reshape(vec![2, 1]).unwrap()).unwrap();
        let (l2, u2) = affine_lu(&w, &b, &x, &x).unwrap();
        let (c2, r2) = affine_cr(&w, &b, &x, &t(&[2], &[0.0, 0.0])).unwrap();
        for i in 0..2 {
            let y = wx.data()[i] + b.data()[i];
            assert!((l2.data()[i] - y).abs() < 1e-12 && (u2.data()[i] - y).abs() < 1e-12);
            assert!((c2.data()[i] - y).abs() < 1e-12);
            assert_eq!(r2.data()[i], 0.0);
        }
    }

    #[test]
    fn monotone_examples() {
        let mut g = Graph::<f64>::new();
        let bx = BoxVars {
            lower: g.constant(t(&[1, 2], &[-1.0, 0.5])),
            upper: g.constant(t(&[1, 2], &[2.0, 1.0])),
        };
        let out = propagate_monotone(&mut g, Nonlinearity::Relu, bx).unwrap();
        assert_eq!(g.value(out.lower).data(), &[0.0, 0.5]);
        assert_eq!(g.value(out.upper).data(), &[2.0, 1.0]);

        let z = BoxVars {
            lower: g.constant(t(&[1, 1], &[0.0])),
            upper: g.constant(t(&[1, 1], &[0.0])),
        };
        let s = propagate_monotone(&mut g, Nonlinearity::Sigmoid, z).unwrap();
        assert_eq!(g.value(s.lower).item(), 0.5);
        assert_eq!(g.value(s.upper).item(), 0.5);

        let wide = BoxVars {
            lower: g.constant(t(&[1, 1], &[-10.0])),
            upper: g.constant(t(&[1, 1], &[10.0])),
        };
        let th = propagate_monotone(&mut g, Nonlinearity::Tanh, wide).unwrap();
        assert!((g.value(th.lower).item() + 1.0).abs() < 1e-8);
        assert!((g.value(th.upper).item() - 1.0).abs() < 1e-8);
    }
}
