//! Projected gradient ascent on the cross-entropy under an l-infinity ball.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bounds::ClipRange;
use crate::error::{Error, Result};
use crate::network::{is_correct, BoundNetwork, NetworkSpec, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eps: f64,
    pub steps: usize,
    /// Defaults to `eps / 10`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub random_init: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            steps: 100,
            step_size: None,
            restarts: 5,
            random_init: true,
            seed: 0,
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.eps / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("attack eps must be >= 0, got {}", self.eps)));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step and one restart".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<T> {
    pub x_adv: Tensor<T>,
    /// Per example: `x_adv` is misclassified.
    pub success: Vec<bool>,
    /// Per example cross-entropy at `x_adv`.
    pub loss: Vec<f64>,
}

/// Feasible set `[max(x - eps, lo), min(x + eps, hi)]` per coordinate.
fn feasible_box<T: Real>(x: &Tensor<T>, eps: f64, clip: ClipRange) -> (Vec<T>, Vec<T>) {
    let (lo, hi) = clip.map_or((T::neg_infinity(), T::infinity()), |(a, b)| (T::of(a), T::of(b)));
    let e = T::of(eps);
    let lower = x.data().iter().map(|&v| (v - e).max(lo)).collect();
    let upper = x.data().iter().map(|&v| (v + e).min(hi)).collect();
    (lower, upper)
}

/// Cross-entropy, its input gradient, and correctness per example.
fn loss_and_grad<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
    want_grad: bool,
) -> Result<(Vec<f64>, Vec<bool>, Option<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = BoundNetwork::bind(&mut g, net, params, false)?;
    let xv = if want_grad { g.param(x.clone()) } else { g.constant(x.clone()) };
    let trace = bound.forward(&mut g, xv)?;
    let logits = *trace.last().expect("nonempty");
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let losses = g.value(ce).to_f64_vec();
    let z = g.value(logits);
    let correct = (0..labels.len()).map(|i| is_correct(z.row(i), labels[i])).collect();
    let grad = if want_grad {
        let s = g.sum(ce)?;
        Some(g.backward(s)?.get_or_zeros(xv, x))
    } else {
        None
    };
    Ok((losses, correct, grad))
}

/// Batched PGD. Keeps, per example, the worst iterate over all steps and
/// restarts: a misclassified iterate beats a correct one, then higher loss
/// wins. The returned points always lie in the feasible box.
pub fn pgd_attack<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    x_nom: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    clip: ClipRange,
) -> Result<AttackResult<T>> {
    cfg.validate()?;
    if x_nom.rows() != labels.len() {
        return Err(Error::InvalidArgument("one label per example required".into()));
    }
    let batch = labels.len();
    let row = x_nom.row_len();
    let (lower, upper) = feasible_box(x_nom, cfg.eps, clip);
    let project = |x: &mut Tensor<T>| {
        for ((v, &l), &u) in x.data_mut().iter_mut().zip(&lower).zip(&upper) {
            *v = v.max(l).min(u);
        }
    };
    let mut best = x_nom.clone();
    project(&mut best);
    let (mut best_loss, mut best_fail, _) = loss_and_grad(net, params, &best, labels, false)?;
    for f in best_fail.iter_mut() {
        *f = !*f;
    }
    if cfg.eps == 0.0 {
        return Ok(AttackResult {
            x_adv: best,
            success: best_fail,
            loss: best_loss,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha = T::of(cfg.step());
    for restart in 0..cfg.restarts {
        // later restarts only matter for examples not yet misclassified
        if restart > 0 && best_fail.iter().all(|&f| f) {
            break;
        }
        let mut x = x_nom.clone();
        if cfg.random_init {
            for v in x.data_mut() {
                *v = *v + T::of(rng.gen_range(-cfg.eps..=cfg.eps));
            }
        }
        project(&mut x);
        for step in 0..=cfg.steps {
            let last = step == cfg.steps;
            let (loss, correct, grad) = loss_and_grad(net, params, &x, labels, !last)?;
            for i in 0..batch {
                let fail = !correct[i];
                let better = (fail && !best_fail[i]) || (fail == best_fail[i] && loss[i] > best_loss[i]);
                if better {
                    best_fail[i] = fail;
                    best_loss[i] = loss[i];
                    best.data_mut()[i * row..(i + 1) * row].copy_from_slice(x.row(i));
                }
            }
            if let Some(gr) = grad {
                for (v, &gv) in x.data_mut().iter_mut().zip(gr.data()) {
                    if gv > T::zero() {
                        *v = *v + alpha;
                    } else if gv < T::zero() {
                        *v = *v - alpha;
                    }
                }
                project(&mut x);
            }
        }
    }
    Ok(AttackResult {
        x_adv: best,
        success: best_fail,
        loss: best_loss,
    })
}
