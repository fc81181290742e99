//! Nominal, PGD, and verified error rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackConfig};
use crate::bounds::ClipRange;
use crate::data::Dataset;
use crate::dual::{verify_batch, DualSource, SubgradientConfig};
use crate::error::{Error, Result};
use crate::network::{forward, is_correct, predict, NetworkSpec, ParamStore};
use crate::tensor::Real;
use crate::verifier::VerifierNet;

/// Dual source for evaluation, without borrowed data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BoundSource {
    Zero,
    Subgradient { steps: usize, step_size: f64 },
    Verifier,
}

impl BoundSource {
    pub fn resolve<'a, T>(&self, verifier: Option<&'a VerifierNet<T>>) -> Result<DualSource<'a, T>> {
        Ok(match self {
            BoundSource::Zero => DualSource::Zero,
            BoundSource::Subgradient { steps, step_size } => DualSource::Subgradient(SubgradientConfig {
                steps: *steps,
                step_size: *step_size,
            }),
            BoundSource::Verifier => DualSource::Verifier(
                verifier.ok_or_else(|| Error::InvalidArgument("verifier dual source needs a verifier network".into()))?,
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub nominal_correct: bool,
    pub attack_success: bool,
    pub certified: bool,
    pub max_zeta: f64,
}

impl ExampleRecord {
    pub fn nominal_fail(&self) -> bool {
        !self.nominal_correct
    }

    pub fn pgd_fail(&self) -> bool {
        !self.nominal_correct || self.attack_success
    }

    pub fn verified_fail(&self) -> bool {
        !self.nominal_correct || !self.certified
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub eps: f64,
    pub nominal_err: f64,
    pub pgd_err: f64,
    pub verified_err: f64,
    /// Examples both certified and successfully attacked. Always zero for a
    /// sound bound; counted rather than hidden.
    pub conflicts: usize,
    pub mean_max_zeta: f64,
    pub dual_source: BoundSource,
    pub attack: AttackConfig,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<ExampleRecord>, eps: f64, dual_source: BoundSource, attack: AttackConfig) -> Self {
        let n = records.len();
        let rate = |f: &dyn Fn(&ExampleRecord) -> bool| {
            if n == 0 {
                0.0
            } else {
                records.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        let nominal_err = rate(&|r| r.nominal_fail());
        let pgd_err = rate(&|r| r.pgd_fail());
        let verified_err = rate(&|r| r.verified_fail());
        let conflicts = records.iter().filter(|r| r.certified && r.pgd_fail()).count();
        let mean_max_zeta = if n == 0 {
            0.0
        } else {
            records.iter().map(|r| r.max_zeta).sum::<f64>() / n as f64
        };
        Self {
            n,
            eps,
            nominal_err,
            pgd_err,
            verified_err,
            conflicts,
            mean_max_zeta,
            dual_source,
            attack,
            records,
        }
    }

    /// `nominal_err <= pgd_err <= verified_err`.
    pub fn check_ordering(&self) -> Result<()> {
        if self.nominal_err <= self.pgd_err && self.pgd_err <= self.verified_err {
            Ok(())
        } else {
            Err(Error::Inconsistent(format!(
                "error ordering violated: nominal {} pgd {} verified {} ({} conflicts)",
                self.nominal_err, self.pgd_err, self.verified_err, self.conflicts
            )))
        }
    }
}

pub struct EvalOptions {
    pub eps: f64,
    pub clip: ClipRange,
    pub attack: AttackConfig,
    pub source: BoundSource,
    pub batch_size: usize,
}

/// Evaluates in `f64` over `data`, in parallel over batches when a rayon
/// pool with several threads is active. Results are in dataset order.
pub fn evaluate<T: Real>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    verifier: Option<&VerifierNet<T>>,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let params64: ParamStore<f64> = params.cast();
    let verifier64 = verifier.map(|v| VerifierNet {
        spec: v.spec.clone(),
        params: v.params.cast::<f64>(),
    });
    let source = opts.source.resolve(verifier64.as_ref())?;
    let attack = AttackConfig { eps: opts.eps, ..opts.attack.clone() };
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(opts.batch_size.max(1)).collect();
    let per_chunk: Vec<Result<Vec<ExampleRecord>>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, idx)| {
            let (x, y) = data.batch::<f64>(idx);
            let logits = forward(net, &params64, &x)?.logits().clone();
            let predicted = predict(&logits);
            let chunk_attack = AttackConfig {
                seed: attack.seed.wrapping_add(ci as u64),
                ..attack.clone()
            };
            let adv = pgd_attack(net, &params64, &x, &y, &chunk_attack, opts.clip)?;
            let ver = verify_batch(net, &params64, &x, &y, opts.eps, opts.clip, &source)?;
            Ok(idx
                .iter()
                .enumerate()
                .map(|(b, &index)| ExampleRecord {
                    index,
                    label: y[b],
                    predicted: predicted[b],
                    nominal_correct: is_correct(logits.row(b), y[b]),
                    attack_success: adv.success[b],
                    certified: ver[b].verified_robust,
                    max_zeta: ver[b].max_zeta(),
                })
                .collect())
        })
        .collect();
    let mut records = Vec::with_capacity(data.len());
    for r in per_chunk {
        records.extend(r?);
    }
    Ok(EvalReport::from_records(records, opts.eps, opts.source, attack))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(nominal: bool, attacked: bool, certified: bool) -> ExampleRecord {
        ExampleRecord {
            index: 0,
            label: 0,
            predicted: 0,
            nominal_correct: nominal,
            attack_success: attacked,
            certified,
            max_zeta: 0.0,
        }
    }

    #[test]
    fn misclassified_counts_everywhere() {
        let r = EvalReport::from_records(
            vec![rec(false, false, true), rec(true, false, true), rec(true, true, false), rec(true, false, false)],
            0.1,
            BoundSource::Zero,
            AttackConfig::new(0.1),
        );
        assert_eq!(r.nominal_err, 0.25);
        assert_eq!(r.pgd_err, 0.5);
        assert_eq!(r.verified_err, 0.75);
        assert_eq!(r.conflicts, 1);
        r.check_ordering().unwrap();
    }

    #[test]
    fn conflicting_record_can_break_ordering() {
        let r = EvalReport::from_records(vec![rec(true, true, true)], 0.1, BoundSource::Zero, AttackConfig::new(0.1));
        assert_eq!(r.conflicts, 1);
        assert!(r.check_ordering().is_err());
    }
}
