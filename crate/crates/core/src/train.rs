//! Joint training of predictor and verifier on
//! `(1 - kappa) * CE + kappa * g(zeta) + dual_l1 * sum_k |lambda_k|_1`.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::autodiff::{Graph, Var};
use crate::bounds::{propagate_all, BoxVars, ClipRange, Parametrization};
use crate::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::dual::{class_bounds, final_term, layer_terms, off_label_columns, robustness_rows, total};
use crate::error::{Error, Result};
use crate::eval::{evaluate, BoundSource, EvalOptions, EvalReport};
use crate::network::{init_params, BoundNetwork, InitScheme, NetworkSpec, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::verifier::{BoundVerifier, VerifierNet, VerifierSpec};

/// How per-class bounds `zeta_i, i != y` become one loss per example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DualLossMode {
    /// `log(1 + max(0, max_i zeta_i))`
    #[default]
    MaxHinge,
    /// `log(1 + exp(max_i zeta_i))`
    SoftplusMax,
    /// `mean_i log(1 + max(0, zeta_i))`
    MeanHinge,
    /// `log(1 + sum_i exp(zeta_i))`: cross-entropy on the bound vector
    /// `[0, zeta_i...]`.
    SoftplusSum,
}

impl std::str::FromStr for DualLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-hinge" => Ok(Self::MaxHinge),
            "softplus-max" => Ok(Self::SoftplusMax),
            "mean-hinge" => Ok(Self::MeanHinge),
            "softplus-sum" => Ok(Self::SoftplusSum),
            other => Err(Error::InvalidArgument(format!("unknown dual loss mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kappa: f64,
    pub eps_target: f64,
    pub anneal_fraction: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub dual_l1: f64,
    pub mode: DualLossMode,
    pub seed: u64,
    pub clip_input: bool,
    /// Global gradient-norm clipping threshold.
    pub grad_clip: Option<f64>,
    pub init: InitScheme,
    /// Evaluate every this many steps; `None` evaluates once per epoch.
    pub eval_every: Option<usize>,
    /// Size of the fixed validation slice.
    pub eval_subset: usize,
    pub eval_attack: AttackConfig,
    pub eval_source: BoundSource,
    /// Write a checkpoint every this many epochs (and at the end).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            eps_target: 0.1,
            anneal_fraction: 0.5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 100,
            epochs: 10,
            max_steps: None,
            dual_l1: 1e-6,
            mode: DualLossMode::MaxHinge,
            seed: 0,
            clip_input: true,
            grad_clip: None,
            init: InitScheme::HeUniform,
            eval_every: None,
            eval_subset: 1000,
            eval_attack: AttackConfig {
                steps: 20,
                restarts: 1,
                ..AttackConfig::new(0.1)
            },
            eval_source: BoundSource::Verifier,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidArgument(format!("kappa must be in [0, 1], got {}", self.kappa)));
        }
        if !(self.eps_target >= 0.0) {
            return Err(Error::InvalidArgument(format!("eps_target must be >= 0, got {}", self.eps_target)));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(Error::InvalidArgument("anneal_fraction must be in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.dual_l1 < 0.0 || self.lr <= 0.0 {
            return Err(Error::InvalidArgument("dual_l1 must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn clip(&self) -> ClipRange {
        self.clip_input.then_some((0.0, 1.0))
    }
}

/// `eps_t = eps_target * min(1, t / (anneal_fraction * total_steps))`.
pub fn anneal_epsilon(t: usize, total_steps: usize, eps_target: f64, anneal_fraction: f64) -> f64 {
    let ramp = anneal_fraction * total_steps as f64;
    if ramp <= 0.0 {
        return eps_target;
    }
    eps_target * (t as f64 / ramp).min(1.0)
}

/// Graph nodes of one loss evaluation; every term is a batch mean.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub dual: Var,
    pub l1: Var,
    /// Per-class bounds `[B, C-1]` in the order of [`off_label_columns`].
    pub zeta: Var,
    pub boxes: Vec<BoxVars>,
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let pos = g.relu(x)?;
    let ax = g.abs(x)?;
    let nax = g.neg(ax)?;
    let e = g.exp(nax)?;
    let e1 = g.add_scalar(e, T::one())?;
    let l = g.log(e1)?;
    g.add(pos, l)
}

fn log1p_relu<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let r = g.relu(x)?;
    let r1 = g.add_scalar(r, T::one())?;
    g.log(r1)
}

/// Per-example dual loss `[B]` from per-class bounds `[B, C-1]`.
pub fn aggregate_dual<T: Real>(g: &mut Graph<T>, zeta: Var, mode: DualLossMode) -> Result<Var> {
    match mode {
        DualLossMode::MaxHinge => {
            let m = g.max_rows(zeta)?;
            log1p_relu(g, m)
        }
        DualLossMode::SoftplusMax => {
            let m = g.max_rows(zeta)?;
            softplus(g, m)
        }
        DualLossMode::MeanHinge => {
            let per = log1p_relu(g, zeta)?;
            let s = g.sum_rows(per)?;
            let width = g.shape(zeta)[1];
            g.scale(s, T::one() / T::of(width as f64))
        }
        DualLossMode::SoftplusSum => {
            let batch = g.shape(zeta)[0];
            let zero = g.constant(Tensor::zeros(vec![batch]));
            let padded = g.concat(&[zero, zeta])?;
            g.softmax_cross_entropy(padded, &vec![0; batch])
        }
    }
}

/// Builds the training loss on `g`. Cross-entropy uses the clean inputs;
/// the dual term uses the box of radius `eps` around them.
#[allow(clippy::too_many_arguments)]
pub fn pvt_loss<T: Real>(
    g: &mut Graph<T>,
    net: &BoundNetwork,
    verifier: &BoundVerifier,
    x: Var,
    labels: &[usize],
    eps: f64,
    clip: ClipRange,
    kappa: f64,
    dual_l1: f64,
    mode: DualLossMode,
) -> Result<LossTerms> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch = labels.len();
    let trace = net.forward(g, x)?;
    let logits = *trace.last().expect("nonempty");
    let classes = g.shape(logits)[1];
    let ce_rows = g.softmax_cross_entropy(logits, labels)?;
    let ce = g.mean(ce_rows)?;
    let boxes = propagate_all(g, net, x, eps, clip, Parametrization::CenterRadius)?;

    let (zeta, lambdas) = if verifier.spec.per_target {
        let mut rows = Vec::with_capacity(batch * (classes - 1));
        let mut row_labels = Vec::with_capacity(rows.capacity());
        let mut row_targets = Vec::with_capacity(rows.capacity());
        for (b, &y) in labels.iter().enumerate() {
            for t in (0..classes).filter(|&t| t != y) {
                rows.push(b);
                row_labels.push(y);
                row_targets.push(t);
            }
        }
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
        let lambdas = verifier.predict(g, &net.shapes, &rep_trace, &row_labels, Some(&row_targets))?;
        let mut terms = layer_terms(g, net, &rep_boxes, &lambdas)?;
        let c = g.constant(robustness_rows(&row_labels, &row_targets, classes));
        let d = g.constant(Tensor::zeros(vec![rows.len()]));
        terms.push(final_term(g, *rep_boxes.last().expect("nonempty"), *lambdas.last().expect("nonempty"), c, d)?);
        let z = total(g, &terms)?;
        (g.reshape(z, &[batch, classes - 1])?, lambdas)
    } else {
        let lambdas = verifier.predict(g, &net.shapes, &trace, labels, None)?;
        let all = class_bounds(g, net, &boxes, &lambdas, labels)?;
        (g.gather_cols(all, &off_label_columns(labels, classes))?, lambdas)
    };
    let per_example = aggregate_dual(g, zeta, mode)?;
    let dual = g.mean(per_example)?;

    let mut l1_total: Option<Var> = None;
    for &lam in &lambdas {
        let a = g.abs(lam)?;
        let s = g.sum(a)?;
        l1_total = Some(match l1_total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let l1_sum = l1_total.expect("at least one layer");
    let l1 = g.scale(l1_sum, T::one() / T::of(batch as f64))?;

    let mut loss = g.scale(ce, T::of(1.0 - kappa))?;
    if kappa > 0.0 {
        let kd = g.scale(dual, T::of(kappa))?;
        loss = g.add(loss, kd)?;
    }
    if dual_l1 > 0.0 {
        let r = g.scale(l1, T::of(dual_l1))?;
        loss = g.add(loss, r)?;
    }
    Ok(LossTerms {
        total: loss,
        ce,
        dual,
        l1,
        zeta,
        boxes,
    })
}

/// Adam over a fixed, ordered list of tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, like: &[&Tensor<T>]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: like.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            v: like.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gr;
                v[j] = b2 * v[j] + (T::one() - b2) * gr * gr;
                *w = *w - step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epsilon_t: f64,
    pub train_loss: f64,
    pub ce_term: f64,
    pub dual_term: f64,
    pub nominal_err: f64,
    pub pgd_err: f64,
    pub verified_err: f64,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub verifier: VerifierNet<T>,
    pub history: Vec<MetricsRow>,
    pub last_eval: Option<EvalReport>,
    pub steps: usize,
}

/// Loss terms of one step, as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub ce: f64,
    pub dual: f64,
}

/// Predictor and verifier state with the optimiser.
pub struct Trainer<T: Real> {
    pub net: NetworkSpec,
    pub params: ParamStore<T>,
    pub verifier: VerifierNet<T>,
    pub cfg: TrainConfig,
    names: Vec<String>,
    adam: Adam<T>,
}

const VERIFIER_TAG: &str = "verifier/";

impl<T: Real> Trainer<T> {
    pub fn new(net: NetworkSpec, verifier: VerifierSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&net, cfg.seed, cfg.init)?;
        let verifier = VerifierNet::init(verifier, &net, cfg.seed.wrapping_add(1))?;
        Ok(Self::from_parts(net, params, verifier, cfg))
    }

    pub fn from_parts(net: NetworkSpec, params: ParamStore<T>, verifier: VerifierNet<T>, cfg: TrainConfig) -> Self {
        let mut names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        names.extend(verifier.params.iter().map(|(n, _)| format!("{VERIFIER_TAG}{n}")));
        let mut trainer = Self {
            net,
            params,
            verifier,
            adam: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, &[]),
            cfg,
            names,
        };
        let like: Vec<Tensor<T>> = trainer.names.iter().map(|n| trainer.tensor(n).clone()).collect();
        trainer.adam = Adam::new(
            trainer.cfg.lr,
            trainer.cfg.beta1,
            trainer.cfg.beta2,
            trainer.cfg.adam_eps,
            &like.iter().collect::<Vec<_>>(),
        );
        trainer
    }

    fn tensor(&self, name: &str) -> &Tensor<T> {
        match name.strip_prefix(VERIFIER_TAG) {
            Some(rest) => self.verifier.params.get(rest).expect("known name"),
            None => self.params.get(name).expect("known name"),
        }
    }

    /// Builds the loss for one batch with every parameter trainable.
    /// Returns the graph, loss terms, and the leaf of each named parameter.
    pub fn build_loss(&self, x: &Tensor<T>, labels: &[usize], eps: f64) -> Result<(Graph<T>, LossTerms, Vec<Var>)> {
        let mut g = Graph::new();
        let bound = BoundNetwork::bind(&mut g, &self.net, &self.params, true)?;
        let bv = self.verifier.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let terms = pvt_loss(
            &mut g,
            &bound,
            &bv,
            xv,
            labels,
            eps,
            self.cfg.clip(),
            self.cfg.kappa,
            self.cfg.dual_l1,
            self.cfg.mode,
        )?;
        let leaves = self
            .names
            .iter()
            .map(|n| {
                let found = match n.strip_prefix(VERIFIER_TAG) {
                    Some(rest) => bv.params.iter().find(|(k, _)| k == rest),
                    None => bound.params.iter().find(|(k, _)| k == n),
                };
                found.map(|(_, v)| *v).expect("every parameter is bound")
            })
            .collect();
        Ok((g, terms, leaves))
    }

    fn diagnostic(g: &Graph<T>, terms: &LossTerms) -> String {
        let mags: Vec<String> = terms
            .boxes
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let m = g.value(b.lower).max_abs().max(g.value(b.upper).max_abs());
                format!("|box_{k}|max={m}")
            })
            .collect();
        format!(
            "ce={} dual={} l1={}; {}",
            g.value(terms.ce).item(),
            g.value(terms.dual).item(),
            g.value(terms.l1).item(),
            mags.join(" ")
        )
    }

    /// One simultaneous update of predictor and verifier from a single loss.
    pub fn step(&mut self, step: usize, x: &Tensor<T>, labels: &[usize], eps: f64) -> Result<StepStats> {
        let (g, terms, leaves) = self.build_loss(x, labels, eps)?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostic: Self::diagnostic(&g, &terms),
            });
        }
        let mut grads = g.backward(terms.total)?;
        let mut gs: Vec<Tensor<T>> = leaves
            .iter()
            .zip(&self.names)
            .map(|(&v, n)| grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tensor(n).shape().to_vec())))
            .collect();
        if gs.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostic: format!("non-finite gradient; {}", Self::diagnostic(&g, &terms)),
            });
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            let norm = gs
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = T::of(max_norm / norm);
                for t in gs.iter_mut() {
                    *t = t.map(|v| v * s);
                }
            }
        }
        let stats = StepStats {
            total: loss.as_f64(),
            ce: g.value(terms.ce).item().as_f64(),
            dual: g.value(terms.dual).item().as_f64(),
        };
        drop(g);
        // same order as `names`: predictor tensors, then verifier tensors
        let Self { params, verifier, adam, .. } = self;
        let mut targets: Vec<&mut Tensor<T>> = params
            .iter_mut()
            .map(|(_, t)| t)
            .chain(verifier.params.iter_mut().map(|(_, t)| t))
            .collect();
        adam.step(&mut targets, &gs);
        Ok(stats)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(
            &self.net,
            &self.params,
            Some(&self.verifier),
            data,
            &EvalOptions {
                eps: self.cfg.eps_target,
                clip: self.cfg.clip(),
                attack: self.cfg.eval_attack.clone(),
                source: self.cfg.eval_source,
                batch_size: 100,
            },
        )
    }

    fn save(&self, dir: &std::path::Path, tag: &str) -> Result<()> {
        save_checkpoint(dir.join(format!("{tag}.ckpt")), &self.net, &self.params, Some(&self.verifier))
    }

    /// Runs the full schedule. Evaluation uses the first `eval_subset`
    /// examples of `val` (or of `train` when `val` is `None`) at
    /// `eps_target`.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, out: &TrainOutputs) -> Result<(Vec<MetricsRow>, Option<EvalReport>, usize)> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let slice = val.unwrap_or(train).head(self.cfg.eval_subset);
        let per_epoch = train.len().div_ceil(self.cfg.batch_size);
        let mut total_steps = per_epoch * self.cfg.epochs;
        if let Some(m) = self.cfg.max_steps {
            total_steps = total_steps.min(m);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(2));
        let mut writer = match &out.metrics_csv {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(csv::Writer::from_path(p)?)
            }
            None => None,
        };
        let mut history = Vec::new();
        let mut last_eval = None;
        let mut acc = (0.0, 0.0, 0.0, 0usize);
        let mut t = 0;
        let mut epoch = 0;
        while t < total_steps {
            let batches = train.epoch_batches(self.cfg.batch_size, &mut rng);
            for idx in batches {
                if t >= total_steps {
                    break;
                }
                let eps_t = anneal_epsilon(t, total_steps, self.cfg.eps_target, self.cfg.anneal_fraction);
                let (x, y) = train.batch::<T>(&idx);
                let s = self.step(t, &x, &y, eps_t)?;
                acc = (acc.0 + s.total, acc.1 + s.ce, acc.2 + s.dual, acc.3 + 1);
                t += 1;
                let at_epoch_end = t % per_epoch == 0 || t == total_steps;
                let due = match self.cfg.eval_every {
                    Some(n) => t % n.max(1) == 0 || t == total_steps,
                    None => at_epoch_end,
                };
                if due {
                    let report = self.evaluate(&slice)?;
                    let n = acc.3.max(1) as f64;
                    let row = MetricsRow {
                        step: t,
                        epsilon_t: anneal_epsilon(t, total_steps, self.cfg.eps_target, self.cfg.anneal_fraction),
                        train_loss: acc.0 / n,
                        ce_term: acc.1 / n,
                        dual_term: acc.2 / n,
                        nominal_err: report.nominal_err,
                        pgd_err: report.pgd_err,
                        verified_err: report.verified_err,
                    };
                    log::info!(
                        "step {} eps {:.4} loss {:.4} nominal {:.3} pgd {:.3} verified {:.3}",
                        row.step,
                        row.epsilon_t,
                        row.train_loss,
                        row.nominal_err,
                        row.pgd_err,
                        row.verified_err
                    );
                    if let Some(w) = writer.as_mut() {
                        w.serialize(&row)?;
                        w.flush().map_err(|e| Error::io(out.metrics_csv.clone().unwrap_or_default(), e))?;
                    }
                    history.push(row);
                    last_eval = Some(report);
                    acc = (0.0, 0.0, 0.0, 0);
                }
                if at_epoch_end {
                    epoch += 1;
                    if let (Some(dir), Some(every)) = (&out.checkpoint_dir, self.cfg.checkpoint_every) {
                        if epoch % every.max(1) == 0 {
                            self.save(dir, &format!("epoch{epoch}"))?;
                        }
                    }
                }
            }
        }
        if let Some(dir) = &out.checkpoint_dir {
            self.save(dir, "final")?;
        }
        Ok((history, last_eval, t))
    }
}

/// Initialises and trains a predictor with a verifier of the given spec.
pub fn train<T: Real>(
    net: &NetworkSpec,
    verifier: VerifierSpec,
    train_data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(net.clone(), verifier, cfg.clone())?;
    let (history, last_eval, steps) = trainer.fit(train_data, val, out)?;
    Ok(TrainOutcome {
        params: trainer.params,
        verifier: trainer.verifier,
        history,
        last_eval,
        steps,
    })
}
