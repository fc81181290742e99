//! Lagrangian dual bounds on the worst-case specification value.
//!
//! For a specification `c^T x_K + d <= 0` over the input box, relaxing the
//! layer equalities `x_{k+1} = h_k(x_k)` with multipliers `lambda_k` gives a
//! separable problem. Its optimum
//!
//! ```text
//! zeta(lambda) = f_0(lambda_0) + sum_{k=1}^{K-1} f_k(lambda_{k-1}, lambda_k) + f_K(lambda_{K-1})
//! f_k = max_{l_k <= x <= u_k} lambda_{k-1}^T x - lambda_k^T h_k(x)     (mu = 0 for k = 0)
//! f_K = max_{l_K <= x <= u_K} (c + lambda_{K-1})^T x + d
//! ```
//!
//! upper-bounds the specification value for every choice of `lambda`, and
//! `zeta < 0` certifies the specification. Each `f_k` is solved in closed
//! form: affine layers maximise a linear function over a box, monotone
//! nonlinearities decompose into scalar problems.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::bounds::{propagate_all, BoxVars, ClipRange, IntervalBounds, Parametrization};
use crate::error::{Error, Result};
use crate::network::{BoundNetwork, NetworkSpec, ParamStore, Transfer};
use crate::nonlin::Nonlinearity;
use crate::tensor::{Real, Tensor};
use crate::verifier::VerifierNet;

/// Half-space specification `c^T x_K + d <= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub c: Vec<f64>,
    pub d: f64,
}

impl LinearSpec {
    /// `(e_target - e_label, 0)`: the target logit never exceeds the label's.
    pub fn robustness(label: usize, target: usize, classes: usize) -> Self {
        let mut c = vec![0.0; classes];
        c[target] += 1.0;
        c[label] -= 1.0;
        Self { c, d: 0.0 }
    }

    /// `c^T logits + d`.
    pub fn evaluate(&self, logits: &[f64]) -> f64 {
        self.c.iter().zip(logits).map(|(a, b)| a * b).sum::<f64>() + self.d
    }
}

/// All robustness specifications of one labelled example.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessSpecSet {
    pub label: usize,
    pub specs: Vec<(usize, LinearSpec)>,
}

impl RobustnessSpecSet {
    pub fn new(label: usize, classes: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {classes} classes")));
        }
        let specs = (0..classes)
            .filter(|&i| i != label)
            .map(|i| (i, LinearSpec::robustness(label, i, classes)))
            .collect();
        Ok(Self { label, specs })
    }
}

/// One multiplier tensor per layer equality, each `[B, shape of x_{k+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualVariables<T> {
    pub lambdas: Vec<Tensor<T>>,
}

impl<T: Real> DualVariables<T> {
    /// Zeros for a network with activation shapes `x_0 ... x_K`.
    pub fn zeros(shapes: &[Vec<usize>], batch: usize) -> Self {
        Self {
            lambdas: shapes[1..]
                .iter()
                .map(|s| {
                    let mut full = vec![batch];
                    full.extend_from_slice(s);
                    Tensor::zeros(full)
                })
                .collect(),
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.lambdas
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.abs().as_f64()))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.lambdas.iter().all(Tensor::is_finite)
    }

    pub fn to_graph(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.lambdas
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn from_graph(g: &Graph<T>, vars: &[Var]) -> Self {
        Self {
            lambdas: vars.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            lambdas: self.lambdas.iter().map(|t| t.select_rows(idx)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub bound: f64,
    pub certified: bool,
    /// `f_0 ... f_{K-1}` followed by `f_K` (which includes `d`).
    pub terms: Vec<f64>,
    pub time_ms: f64,
}

/// Strict certificate: `zeta < 0`.
pub fn certify(result: &VerificationResult) -> bool {
    result.bound < 0.0
}

/// Which end of the interval maximised a scalar conjugate problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Active {
    Lower,
    Upper,
    Interior,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarConjugate<T> {
    pub value: T,
    pub argmax: T,
    pub active: Active,
}

/// Grid resolution of the fallback solver.
pub const GRID_POINTS: usize = 1024;

/// `max_{l <= x <= u} mu x - lam h(x)`, solved exactly over the endpoints
/// and the interior stationary points.
pub fn conjugate_scalar<T: Real>(nl: Nonlinearity, mu: T, lam: T, l: T, u: T) -> ScalarConjugate<T> {
    let obj = |x: T| mu * x - lam * nl.eval(x);
    let mut best = ScalarConjugate {
        value: obj(l),
        argmax: l,
        active: Active::Lower,
    };
    let mut consider = |x: T, active: Active| {
        let v = obj(x);
        if v > best.value {
            best = ScalarConjugate {
                value: v,
                argmax: x,
                active,
            };
        }
    };
    consider(u, Active::Upper);
    let inside = |x: T| x > l && x < u;
    match nl {
        Nonlinearity::Relu => {
            if inside(T::zero()) {
                consider(T::zero(), Active::Interior);
            }
        }
        Nonlinearity::Sigmoid | Nonlinearity::Tanh => {
            if lam != T::zero() {
                let ratio = mu / lam;
                // h'(x) = ratio has the symmetric solutions +-x*
                let x_star = match nl {
                    Nonlinearity::Sigmoid if ratio > T::zero() && ratio <= T::of(0.25) => {
                        let d = (T::one() - T::of(4.0) * ratio).max(T::zero()).sqrt();
                        Some(T::of(2.0) * d.atanh())
                    }
                    Nonlinearity::Tanh if ratio > T::zero() && ratio <= T::one() => {
                        let t = (T::one() - ratio).max(T::zero()).sqrt();
                        Some(t.atanh())
                    }
                    _ => None,
                };
                if let Some(x) = x_star {
                    for cand in [x, -x] {
                        if inside(cand) {
                            consider(cand, Active::Interior);
                        }
                    }
                }
            }
        }
    }
    if !best.value.is_finite() {
        return conjugate_grid(nl, mu, lam, l, u, GRID_POINTS);
    }
    best
}

/// Grid maximum plus the Lipschitz remainder `L * spacing / 2`, with
/// `L = |mu| + |lam| * sup|h'|`. Always an upper bound on the true maximum.
pub fn conjugate_grid<T: Real>(nl: Nonlinearity, mu: T, lam: T, l: T, u: T, points: usize) -> ScalarConjugate<T> {
    let points = points.max(2);
    let spacing = (u - l) / T::of((points - 1) as f64);
    let mut best = (T::neg_infinity(), l);
    for i in 0..points {
        let x = if i + 1 == points { u } else { l + spacing * T::of(i as f64) };
        let v = mu * x - lam * nl.eval(x);
        if v > best.0 {
            best = (v, x);
        }
    }
    let lipschitz = mu.abs() + lam.abs() * T::of(nl.max_slope());
    ScalarConjugate {
        value: best.0 + lipschitz * spacing * T::of(0.5),
        argmax: best.1,
        active: Active::Interior,
    }
}

struct ConjugateElementwiseOp<T> {
    nl: Nonlinearity,
    argmax: Vec<T>,
    active: Vec<Active>,
}

impl<T: Real> CustomOp<T> for ConjugateElementwiseOp<T> {
    fn name(&self) -> &'static str {
        "conjugate_elementwise"
    }

    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (mu, lam) = (inputs[0], inputs[1]);
        let gd = grad.data();
        let n = gd.len();
        let mut gmu = Vec::with_capacity(n);
        let mut glam = Vec::with_capacity(n);
        let mut gl = vec![T::zero(); n];
        let mut gu = vec![T::zero(); n];
        for i in 0..n {
            let x = self.argmax[i];
            gmu.push(gd[i] * x);
            glam.push(-gd[i] * self.nl.eval(x));
            let slope = mu.data()[i] - lam.data()[i] * self.nl.derivative(x);
            match self.active[i] {
                Active::Lower => gl[i] = gd[i] * slope,
                Active::Upper => gu[i] = gd[i] * slope,
                Active::Interior => {}
            }
        }
        let shape = grad.shape().to_vec();
        vec![
            Some(Tensor::new(shape.clone(), gmu).expect("shape")),
            Some(Tensor::new(shape.clone(), glam).expect("shape")),
            Some(Tensor::new(shape.clone(), gl).expect("shape")),
            Some(Tensor::new(shape, gu).expect("shape")),
        ]
    }
}

/// Elementwise conjugate values `max_{l_i <= x <= u_i} mu_i x - lam_i h(x)`,
/// same shape as the inputs. Gradients follow the envelope theorem.
pub fn conjugate_elementwise<T: Real>(
    g: &mut Graph<T>,
    nl: Nonlinearity,
    mu: Var,
    lam: Var,
    bx: BoxVars,
) -> Result<Var> {
    let shape = g.shape(lam).to_vec();
    for v in [mu, bx.lower, bx.upper] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::shape("conjugate_elementwise", g.shape(v), &shape));
        }
    }
    let (m, la, l, u) = (g.value(mu), g.value(lam), g.value(bx.lower), g.value(bx.upper));
    let n = la.len();
    let mut values = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for i in 0..n {
        let s = conjugate_scalar(nl, m.data()[i], la.data()[i], l.data()[i], u.data()[i]);
        values.push(s.value);
        argmax.push(s.argmax);
        active.push(s.active);
    }
    let value = Tensor::new(shape, values)?;
    g.custom(
        &[mu, lam, bx.lower, bx.upper],
        value,
        Box::new(ConjugateElementwiseOp { nl, argmax, active }),
    )
}

/// Row-wise `max_{x in box} nu^T x = nu^T c + |nu|^T r`.
pub fn linear_box_max<T: Real>(g: &mut Graph<T>, nu: Var, bx: BoxVars) -> Result<Var> {
    let (c, r) = bx.center_radius(g)?;
    let nc = g.mul(nu, c)?;
    let an = g.abs(nu)?;
    let ar = g.mul(an, r)?;
    let s = g.add(nc, ar)?;
    g.sum_rows(s)
}

/// Row-wise `max_{x in box} mu^T x - lam^T (W x + b)` for an affine layer;
/// `mu = None` means zero.
pub fn conjugate_affine<T: Real>(
    g: &mut Graph<T>,
    layer: &Transfer,
    mu: Option<Var>,
    lam: Var,
    bx: BoxVars,
) -> Result<Var> {
    let wt = layer.apply_transpose(g, lam)?;
    let nu = match mu {
        Some(m) => g.sub(m, wt)?,
        None => g.neg(wt)?,
    };
    if g.shape(nu) != g.shape(bx.lower) {
        return Err(Error::shape("conjugate_affine", g.shape(nu), g.shape(bx.lower)));
    }
    let lin = linear_box_max(g, nu, bx)?;
    let lb = layer.bias_dot(g, lam)?;
    g.sub(lin, lb)
}

fn check_duals<T: Real>(g: &Graph<T>, boxes: &[BoxVars], lambdas: &[Var]) -> Result<()> {
    if boxes.len() != lambdas.len() + 1 {
        return Err(Error::Inconsistent(format!(
            "{} boxes but {} dual tensors",
            boxes.len(),
            lambdas.len()
        )));
    }
    for (k, &lam) in lambdas.iter().enumerate() {
        if g.shape(lam) != g.shape(boxes[k + 1].lower) {
            return Err(Error::Inconsistent(format!(
                "lambda_{k} has shape {:?}, expected {:?}",
                g.shape(lam),
                g.shape(boxes[k + 1].lower)
            )));
        }
    }
    Ok(())
}

/// `f_0 ... f_{K-1}`, each `[B]`.
pub fn layer_terms<T: Real>(g: &mut Graph<T>, net: &BoundNetwork, boxes: &[BoxVars], lambdas: &[Var]) -> Result<Vec<Var>> {
    if net.depth() != lambdas.len() {
        return Err(Error::Inconsistent(format!(
            "network has {} layers but {} dual tensors",
            net.depth(),
            lambdas.len()
        )));
    }
    check_duals(g, boxes, lambdas)?;
    let mut terms = Vec::with_capacity(lambdas.len());
    for (k, layer) in net.layers.iter().enumerate() {
        let mu = if k == 0 { None } else { Some(lambdas[k - 1]) };
        let f = match layer {
            Transfer::Elementwise(nl) => {
                let mu = match mu {
                    Some(m) => m,
                    None => {
                        let zeros = Tensor::zeros(g.shape(lambdas[0]).to_vec());
                        g.constant(zeros)
                    }
                };
                let vals = conjugate_elementwise(g, *nl, mu, lambdas[k], boxes[k])?;
                g.sum_rows(vals)?
            }
            _ => conjugate_affine(g, layer, mu, lambdas[k], boxes[k])?,
        };
        terms.push(f);
    }
    Ok(terms)
}

/// `f_K = max_{x in box_K} (c + lambda_{K-1})^T x + d`, with `c` given per
/// row as `[B, classes]` and `d` as `[B]`.
pub fn final_term<T: Real>(g: &mut Graph<T>, last_box: BoxVars, lam_last: Var, c: Var, d: Var) -> Result<Var> {
    let nu = g.add(c, lam_last)?;
    let m = linear_box_max(g, nu, last_box)?;
    g.add(m, d)
}

/// Sums per-row terms into `zeta`.
pub fn total<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// One-hot difference rows `e_target - e_label`, `[B, classes]`.
pub fn robustness_rows<T: Real>(labels: &[usize], targets: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, (&y, &t)) in labels.iter().zip(targets).enumerate() {
        data[i * classes + t] = data[i * classes + t] + T::one();
        data[i * classes + y] = data[i * classes + y] - T::one();
    }
    Tensor::new(vec![labels.len(), classes], data).expect("shape")
}

/// `zeta_i` for every class `i` with duals shared across classes, `[B, C]`.
/// Column `y` is the bound for `c = 0` and carries no meaning.
pub fn class_bounds<T: Real>(
    g: &mut Graph<T>,
    net: &BoundNetwork,
    boxes: &[BoxVars],
    lambdas: &[Var],
    labels: &[usize],
) -> Result<Var> {
    let shared_terms = layer_terms(g, net, boxes, lambdas)?;
    let shared = total(g, &shared_terms)?;
    let last_box = *boxes.last().expect("nonempty");
    let lam_last = *lambdas.last().expect("nonempty");
    let classes = g.shape(last_box.lower)[1];
    let zero_d = g.constant(Tensor::zeros(vec![labels.len()]));
    let mut cols = Vec::with_capacity(classes);
    for i in 0..classes {
        let targets = vec![i; labels.len()];
        let c = g.constant(robustness_rows(labels, &targets, classes));
        let fk = final_term(g, last_box, lam_last, c, zero_d)?;
        cols.push(g.add(shared, fk)?);
    }
    g.concat(&cols)
}

/// Column indices `i != y` per row, for [`Graph::gather_cols`].
pub fn off_label_columns(labels: &[usize], classes: usize) -> Vec<usize> {
    labels
        .iter()
        .flat_map(|&y| (0..classes).filter(move |&i| i != y))
        .collect()
}

/// Evaluates `zeta(lambda)` for one example and specification from
/// precomputed bounds.
#[allow(clippy::too_many_arguments)]
pub fn dual_bound<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    eps: f64,
    spec: &LinearSpec,
    bounds: &IntervalBounds<T>,
    lam: &DualVariables<T>,
) -> Result<VerificationResult> {
    let start = Instant::now();
    if (bounds.eps - eps).abs() > 0.0 {
        return Err(Error::Inconsistent(format!(
            "bounds computed for eps {} but asked for {eps}",
            bounds.eps
        )));
    }
    if bounds.lower.first().map(|l| l.shape()) != Some(x_nom.shape()) {
        return Err(Error::Inconsistent("input box does not match x_nom".into()));
    }
    if x_nom.rows() != 1 {
        return Err(Error::Inconsistent("dual_bound takes a single example".into()));
    }
    let classes = net.classes;
    if spec.c.len() != classes {
        return Err(Error::Inconsistent(format!(
            "spec has {} coefficients for {classes} logits",
            spec.c.len()
        )));
    }
    let mut g = Graph::new();
    let bound = BoundNetwork::bind(&mut g, net, params, false)?;
    let boxes = bounds.to_graph(&mut g);
    let lambdas = lam.to_graph(&mut g, false);
    let mut terms = layer_terms(&mut g, &bound, &boxes, &lambdas)?;
    let c = g.constant(Tensor::from_f64(vec![1, classes], &spec.c)?);
    let d = g.constant(Tensor::from_f64(vec![1], &[spec.d])?);
    terms.push(final_term(&mut g, *boxes.last().expect("nonempty"), *lambdas.last().expect("nonempty"), c, d)?);
    let term_values: Vec<f64> = terms.iter().map(|&t| g.value(t).item().as_f64()).collect();
    let zeta = total(&mut g, &terms)?;
    let bound_value = g.value(zeta).item().as_f64();
    Ok(VerificationResult {
        bound: bound_value,
        certified: bound_value < 0.0,
        terms: term_values,
        time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Step sizes `alpha_t = alpha_0 / sqrt(1 + t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgradientConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for SubgradientConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 0.1,
        }
    }
}

impl SubgradientConfig {
    pub fn alpha(&self, t: usize) -> f64 {
        self.step_size / (1.0 + t as f64).sqrt()
    }
}

/// Rows of independent dual problems sharing one network: row `i` has its
/// own boxes, duals, and specification.
pub struct DualRows<'a, T: Real> {
    pub net: &'a NetworkSpec,
    pub params: &'a ParamStore<T>,
    pub bounds: &'a IntervalBounds<T>,
    /// `[N, classes]`
    pub c: Tensor<T>,
    /// `[N]`
    pub d: Tensor<T>,
}

impl<'a, T: Real> DualRows<'a, T> {
    /// `zeta` per row and its gradient with respect to every `lambda_k`.
    pub fn evaluate(&self, lam: &DualVariables<T>, with_grad: bool) -> Result<(Vec<f64>, Option<DualVariables<T>>)> {
        let mut g = Graph::new();
        let bound = BoundNetwork::bind(&mut g, self.net, self.params, false)?;
        let boxes = self.bounds.to_graph(&mut g);
        let lambdas = lam.to_graph(&mut g, with_grad);
        let mut terms = layer_terms(&mut g, &bound, &boxes, &lambdas)?;
        let c = g.constant(self.c.clone());
        let d = g.constant(self.d.clone());
        terms.push(final_term(&mut g, *boxes.last().expect("nonempty"), *lambdas.last().expect("nonempty"), c, d)?);
        let zeta = total(&mut g, &terms)?;
        let values = g.value(zeta).to_f64_vec();
        if !with_grad {
            return Ok((values, None));
        }
        let s = g.sum(zeta)?;
        let grads = g.backward(s)?;
        let gl = DualVariables {
            lambdas: lambdas
                .iter()
                .zip(&lam.lambdas)
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect(),
        };
        Ok((values, Some(gl)))
    }

    /// Subgradient descent from `init`, keeping the per-row best iterate.
    /// Every iterate is a valid bound, so the running minimum is too.
    pub fn subgradient(&self, init: DualVariables<T>, cfg: &SubgradientConfig) -> Result<(DualVariables<T>, Vec<f64>)> {
        self.subgradient_until(init, cfg, |_, _| false)
    }

    /// As [`DualRows::subgradient`], calling `observe(step, best)` after each
    /// evaluation; stops early when it returns `true`.
    pub fn subgradient_until(
        &self,
        init: DualVariables<T>,
        cfg: &SubgradientConfig,
        mut observe: impl FnMut(usize, &[f64]) -> bool,
    ) -> Result<(DualVariables<T>, Vec<f64>)> {
        let mut lam = init;
        let mut best_lam = lam.clone();
        let mut best: Vec<f64> = Vec::new();
        for t in 0..=cfg.steps {
            let last = t == cfg.steps;
            let (values, grad) = self.evaluate(&lam, !last)?;
            if best.is_empty() {
                best = values.clone();
            } else {
                for (i, &v) in values.iter().enumerate() {
                    if v < best[i] {
                        best[i] = v;
                        for (bk, lk) in best_lam.lambdas.iter_mut().zip(&lam.lambdas) {
                            let w = bk.row_len();
                            bk.data_mut()[i * w..(i + 1) * w].copy_from_slice(lk.row(i));
                        }
                    }
                }
            }
            if observe(t, &best) || last {
                break;
            }
            let alpha = T::of(cfg.alpha(t));
            let grad = grad.expect("gradient requested");
            for (lk, gk) in lam.lambdas.iter_mut().zip(&grad.lambdas) {
                for (v, &gv) in lk.data_mut().iter_mut().zip(gk.data()) {
                    *v = *v - alpha * gv;
                }
            }
        }
        Ok((best_lam, best))
    }
}

/// Subgradient refinement of a single specification starting at `lambda = 0`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_duals_subgradient<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    eps: f64,
    clip: ClipRange,
    spec: &LinearSpec,
    cfg: &SubgradientConfig,
) -> Result<(DualVariables<T>, f64)> {
    let bounds = crate::bounds::interval_bounds(net, params, x_nom, eps, clip, Parametrization::CenterRadius)?;
    if spec.c.len() != net.classes {
        return Err(Error::Inconsistent("spec length does not match class count".into()));
    }
    let rows = DualRows {
        net,
        params,
        bounds: &bounds,
        c: Tensor::from_f64(vec![1, net.classes], &spec.c)?,
        d: Tensor::from_f64(vec![1], &[spec.d])?,
    };
    let (_, shapes) = net.resolve()?;
    let (lam, best) = rows.subgradient(DualVariables::zeros(&shapes, 1), cfg)?;
    Ok((lam, best[0]))
}

/// Where dual variables come from when verifying.
#[derive(Clone, Copy, Debug)]
pub enum DualSource<'a, T> {
    /// `lambda = 0`: plain interval bounds.
    Zero,
    /// Per-class subgradient refinement from zero.
    Subgradient(SubgradientConfig),
    /// A trained verifier network.
    Verifier(&'a VerifierNet<T>),
}

impl<T> DualSource<'_, T> {
    pub fn label(&self) -> String {
        match self {
            DualSource::Zero => "zero".into(),
            DualSource::Subgradient(c) => format!("subgradient({})", c.steps),
            DualSource::Verifier(_) => "verifier".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBound {
    pub target: usize,
    pub zeta: f64,
    pub certified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleVerification {
    pub label: usize,
    pub per_class: Vec<ClassBound>,
    pub verified_robust: bool,
}

impl ExampleVerification {
    fn from_bounds(label: usize, targets: &[usize], zetas: &[f64]) -> Self {
        let per_class: Vec<ClassBound> = targets
            .iter()
            .zip(zetas)
            .map(|(&target, &zeta)| ClassBound {
                target,
                zeta,
                certified: zeta < 0.0,
            })
            .collect();
        let verified_robust = per_class.iter().all(|c| c.certified);
        Self {
            label,
            per_class,
            verified_robust,
        }
    }

    pub fn max_zeta(&self) -> f64 {
        self.per_class.iter().map(|c| c.zeta).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-class bounds for a batch. One bound propagation is shared by every
/// class of an example.
#[allow(clippy::too_many_arguments)]
pub fn verify_batch<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    labels: &[usize],
    eps: f64,
    clip: ClipRange,
    source: &DualSource<'_, T>,
) -> Result<Vec<ExampleVerification>> {
    let classes = net.classes;
    if x_nom.rows() != labels.len() {
        return Err(Error::InvalidArgument("one label per example required".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let batch = labels.len();
    let mut g = Graph::new();
    let bound = BoundNetwork::bind(&mut g, net, params, false)?;
    let x = g.constant(x_nom.clone());
    let trace = bound.forward(&mut g, x)?;
    let boxes = propagate_all(&mut g, &bound, x, eps, clip, Parametrization::CenterRadius)?;
    let targets_of = |y: usize| (0..classes).filter(move |&i| i != y);

    match source {
        DualSource::Zero | DualSource::Verifier(_) => {
            let per_target = matches!(source, DualSource::Verifier(v) if v.spec.per_target);
            if per_target {
                let DualSource::Verifier(v) = source else { unreachable!() };
                let (rows, row_labels, row_targets): (Vec<usize>, Vec<usize>, Vec<usize>) = {
                    let mut r = (Vec::new(), Vec::new(), Vec::new());
                    for (b, &y) in labels.iter().enumerate() {
                        for t in targets_of(y) {
                            r.0.push(b);
                            r.1.push(y);
                            r.2.push(t);
                        }
                    }
                    r
                };
                let rep_trace: Vec<Var> = trace.iter().map(|&t| g.gather_rows(t, &rows)).collect::<Result<_>>()?;
                let rep_boxes: Vec<BoxVars> = boxes
                    .iter()
                    .map(|b| {
                        Ok(BoxVars {
                            lower: g.gather_rows(b.lower, &rows)?,
                            upper: g.gather_rows(b.upper, &rows)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let lambdas = v.predict(&mut g, &bound.shapes, &rep_trace, &row_labels, Some(&row_targets))?;
                let mut terms = layer_terms(&mut g, &bound, &rep_boxes, &lambdas)?;
                let c = g.constant(robustness_rows(&row_labels, &row_targets, classes));
                let d = g.constant(Tensor::zeros(vec![rows.len()]));
                terms.push(final_term(&mut g, *rep_boxes.last().expect("nonempty"), *lambdas.last().expect("nonempty"), c, d)?);
                let zeta = total(&mut g, &terms)?;
                let z = g.value(zeta).to_f64_vec();
                let per = classes - 1;
                return Ok(labels
                    .iter()
                    .enumerate()
                    .map(|(b, &y)| {
                        let ts: Vec<usize> = targets_of(y).collect();
                        ExampleVerification::from_bounds(y, &ts, &z[b * per..(b + 1) * per])
                    })
                    .collect());
            }
            let lambdas = match source {
                DualSource::Verifier(v) => v.predict(&mut g, &bound.shapes, &trace, labels, None)?,
                _ => DualVariables::<T>::zeros(&bound.shapes, batch).to_graph(&mut g, false),
            };
            let zeta = class_bounds(&mut g, &bound, &boxes, &lambdas, labels)?;
            let z = g.value(zeta);
            Ok(labels
                .iter()
                .enumerate()
                .map(|(b, &y)| {
                    let ts: Vec<usize> = targets_of(y).collect();
                    let zs: Vec<f64> = ts.iter().map(|&t| z.row(b)[t].as_f64()).collect();
                    ExampleVerification::from_bounds(y, &ts, &zs)
                })
                .collect())
        }
        DualSource::Subgradient(cfg) => {
            let bounds = IntervalBounds::from_graph(&g, &boxes, eps);
            let mut rows = Vec::new();
            let mut row_labels = Vec::new();
            let mut row_targets = Vec::new();
            for (b, &y) in labels.iter().enumerate() {
                for t in targets_of(y) {
                    rows.push(b);
                    row_labels.push(y);
                    row_targets.push(t);
                }
            }
            let rep = bounds.select_rows(&rows);
            let problem = DualRows {
                net,
                params,
                bounds: &rep,
                c: robustness_rows(&row_labels, &row_targets, classes),
                d: Tensor::zeros(vec![rows.len()]),
            };
            let init = DualVariables::zeros(&bound.shapes, rows.len());
            let (_, best) = problem.subgradient(init, cfg)?;
            let per = classes - 1;
            Ok(labels
                .iter()
                .enumerate()
                .map(|(b, &y)| {
                    let ts: Vec<usize> = targets_of(y).collect();
                    ExampleVerification::from_bounds(y, &ts, &best[b * per..(b + 1) * per])
                })
                .collect())
        }
    }
}

/// Per-class bounds for a single example `[1, input_shape...]`.
pub fn verify_example<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    label: usize,
    eps: f64,
    clip: ClipRange,
    source: &DualSource<'_, T>,
) -> Result<ExampleVerification> {
    let mut out = verify_batch(net, params, x_nom, &[label], eps, clip, source)?;
    Ok(out.remove(0))
}

/// Bound of one (example, target) pair against elapsed refinement time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget_ms: f64,
    pub steps: usize,
    pub zeta: f64,
}

/// Per-class running-minimum bounds reported at each time budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub label: usize,
    pub targets: Vec<usize>,
    /// `curve[j][i]`: bound for `targets[i]` at `budgets[j]`.
    pub curve: Vec<Vec<BudgetPoint>>,
}

impl BudgetCurve {
    /// Worst-class bound at each budget.
    pub fn max_bounds(&self) -> Vec<f64> {
        self.curve
            .iter()
            .map(|pts| pts.iter().map(|p| p.zeta).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Refines the duals of one example by subgradient steps starting from the
/// given source (`Zero` or `Verifier`), recording the running-minimum bound
/// once each budget in `budgets_ms` (ascending) has elapsed. Budget zero
/// reports the starting bound.
#[allow(clippy::too_many_arguments)]
pub fn verify_with_budget<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    label: usize,
    eps: f64,
    clip: ClipRange,
    start: &DualSource<'_, T>,
    step_size: f64,
    budgets_ms: &[f64],
) -> Result<BudgetCurve> {
    if budgets_ms.windows(2).any(|w| w[0] > w[1]) || budgets_ms.iter().any(|&b| b < 0.0 || b.is_nan()) {
        return Err(Error::InvalidArgument("budgets must be ascending and non-negative".into()));
    }
    let classes = net.classes;
    let targets: Vec<usize> = (0..classes).filter(|&i| i != label).collect();
    let bounds = crate::bounds::interval_bounds(net, params, x_nom, eps, clip, Parametrization::CenterRadius)?;
    let rows = vec![0usize; targets.len()];
    let labels = vec![label; targets.len()];
    let init = match start {
        DualSource::Verifier(v) => {
            let mut g = Graph::new();
            let bound = BoundNetwork::bind(&mut g, net, params, false)?;
            let x = g.constant(x_nom.clone());
            let trace = bound.forward(&mut g, x)?;
            let rep: Vec<Var> = trace.iter().map(|&t| g.gather_rows(t, &rows)).collect::<Result<_>>()?;
            let tg = if v.spec.per_target { Some(targets.as_slice()) } else { None };
            let lams = v.predict(&mut g, &bound.shapes, &rep, &labels, tg)?;
            DualVariables::from_graph(&g, &lams)
        }
        DualSource::Zero => {
            let (_, shapes) = net.resolve()?;
            DualVariables::zeros(&shapes, targets.len())
        }
        DualSource::Subgradient(_) => {
            return Err(Error::InvalidArgument("budgeted refinement starts from zero or verifier duals".into()))
        }
    };
    let rep = bounds.select_rows(&rows);
    let problem = DualRows {
        net,
        params,
        bounds: &rep,
        c: robustness_rows(&labels, &targets, classes),
        d: Tensor::zeros(vec![targets.len()]),
    };
    let cfg = SubgradientConfig {
        steps: usize::MAX - 1,
        step_size,
    };
    let mut curve: Vec<Vec<BudgetPoint>> = Vec::with_capacity(budgets_ms.len());
    let started = Instant::now();
    // a verifier start can be looser than lambda = 0; any positive budget
    // also covers the naive bound
    let naive = match start {
        DualSource::Verifier(_) => Some(problem.evaluate(&DualVariables::zeros(&net.resolve()?.1, targets.len()), false)?.0),
        _ => None,
    };
    problem.subgradient_until(init, &cfg, |step, best| {
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        // Budget b is satisfied by the best bound seen before b ran out;
        // step 0 is the starting bound and counts for every budget >= 0.
        while curve.len() < budgets_ms.len() && (step == 0 && budgets_ms[curve.len()] == 0.0 || elapsed >= budgets_ms[curve.len()]) {
            let b = budgets_ms[curve.len()];
            curve.push(
                best.iter()
                    .enumerate()
                    .map(|(i, &z)| BudgetPoint {
                        budget_ms: b,
                        steps: step,
                        zeta: match &naive {
                            Some(n) if b > 0.0 => z.min(n[i]),
                            _ => z,
                        },
                    })
                    .collect(),
            );
        }
        curve.len() == budgets_ms.len()
    })?;
    Ok(BudgetCurve {
        label,
        targets,
        curve,
    })
}
