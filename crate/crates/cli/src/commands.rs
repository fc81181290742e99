//! Subcommand implementations. Every JSON artifact embeds the resolved
//! config and the SHA-256 of the checkpoint it used.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use vericert::attack::pgd_attack;
use vericert::checkpoint::{load_checkpoint, Checkpoint};
use vericert::data::Dataset;
use vericert::dual::{verify_example, verify_with_budget, BudgetCurve, ClassBound, DualSource, LinearSpec};
use vericert::eval::{evaluate, BoundSource, EvalOptions, EvalReport};
use vericert::network::NetworkSpec;
use vericert::oracle::{corner_and_random_max, grid_max, MAX_GRID_DIM};
use vericert::train::{train, MetricsRow, TrainOutputs};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl CheckpointRef {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        Ok(Self {
            path: path.to_path_buf(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }
}

#[derive(Serialize)]
struct Artifact<'a, R: Serialize> {
    command: &'a str,
    config: &'a ExperimentConfig,
    checkpoint: Option<&'a CheckpointRef>,
    result: R,
}

fn write_artifact<R: Serialize>(
    path: &Path,
    command: &str,
    config: &ExperimentConfig,
    checkpoint: Option<&CheckpointRef>,
    result: R,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let artifact = Artifact {
        command,
        config,
        checkpoint,
        result,
    };
    let text = serde_json::to_string_pretty(&artifact)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Source of dual variables chosen on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualSourceArg {
    Zero,
    Subgradient,
    Verifier,
}

#[derive(Clone, Copy, Debug)]
pub struct DualArgs {
    pub source: DualSourceArg,
    pub steps: usize,
    pub step_size: f64,
}

impl DualArgs {
    fn bound_source(&self) -> BoundSource {
        match self.source {
            DualSourceArg::Zero => BoundSource::Zero,
            DualSourceArg::Subgradient => BoundSource::Subgradient {
                steps: self.steps,
                step_size: self.step_size,
            },
            DualSourceArg::Verifier => BoundSource::Verifier,
        }
    }
}

struct Loaded {
    ckpt: Checkpoint<f64>,
    cref: CheckpointRef,
    data: Dataset,
}

/// Loads the checkpoint in `f64` and the first `subset` test examples.
fn load(cfg: &ExperimentConfig, checkpoint: &Path, subset: Option<usize>) -> Result<Loaded> {
    let ckpt = load_checkpoint::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cref = CheckpointRef::of(checkpoint)?;
    let split = cfg.dataset.load(cfg.seed)?;
    let data = match subset {
        Some(n) => split.test.head(n),
        None => split.test,
    };
    check_compatible(&ckpt.net, &data)?;
    Ok(Loaded { ckpt, cref, data })
}

fn check_compatible(net: &NetworkSpec, data: &Dataset) -> Result<()> {
    if net.input_shape != data.input_shape || net.classes != data.classes {
        bail!(
            "checkpoint expects input {:?} with {} classes, dataset {} has {:?} with {}",
            net.input_shape,
            net.classes,
            data.name,
            data.input_shape,
            data.classes
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainResult {
    steps: usize,
    metrics_csv: PathBuf,
    history: Vec<MetricsRow>,
    last_eval: Option<EvalReport>,
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<CheckpointRef> {
    let split = cfg.dataset.load(cfg.seed)?;
    let net = cfg.network(&split)?;
    let out = TrainOutputs {
        metrics_csv: Some(cfg.out_dir.join("metrics.csv")),
        checkpoint_dir: Some(cfg.out_dir.join("checkpoints")),
    };
    let started = Instant::now();
    let outcome = train::<f32>(&net, cfg.verifier_spec(), &split.train, Some(&split.test), &cfg.train, &out)?;
    log::info!("trained {} steps in {:.1}s", outcome.steps, started.elapsed().as_secs_f64());
    let cref = CheckpointRef::of(&cfg.out_dir.join("checkpoints").join("final.ckpt"))?;
    let result = TrainResult {
        steps: outcome.steps,
        metrics_csv: cfg.out_dir.join("metrics.csv"),
        history: outcome.history,
        last_eval: outcome.last_eval,
    };
    write_artifact(&cfg.out_dir.join("run.json"), "train", cfg, Some(&cref), result)?;
    Ok(cref)
}

#[derive(Serialize)]
struct Certificate {
    index: usize,
    label: usize,
    per_class: Vec<ClassBound>,
    verified_robust: bool,
    max_zeta: f64,
    time_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget_curve: Option<BudgetCurve>,
    /// Worst-class bound at each budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    budget_max_zeta: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct VerifyResult {
    epsilon: f64,
    dual_source: String,
    budgets_ms: Option<Vec<f64>>,
    n: usize,
    certified: usize,
    verified_err: f64,
    certificates: Vec<Certificate>,
}

fn resolve_source<'a>(args: &DualArgs, ckpt: &'a Checkpoint<f64>) -> Result<DualSource<'a, f64>> {
    Ok(args.bound_source().resolve(ckpt.verifier.as_ref())?)
}

pub fn verify_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    subset: Option<usize>,
    dual: DualArgs,
    budgets_ms: Option<Vec<f64>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let Loaded { ckpt, cref, data } = load(cfg, checkpoint, subset)?;
    let eps = cfg.train.eps_target;
    let clip = cfg.clip();
    let source = resolve_source(&dual, &ckpt)?;
    if budgets_ms.is_some() && dual.source == DualSourceArg::Subgradient {
        bail!("--time-budget-ms refines from zero or verifier duals; use --dual-source zero or verifier");
    }
    let certificates: Vec<Certificate> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = data.batch::<f64>(&[i]);
            let started = Instant::now();
            let ver = verify_example(&ckpt.net, &ckpt.params, &x, y[0], eps, clip, &source)?;
            let time_ms = started.elapsed().as_secs_f64() * 1e3;
            let budget_curve = match &budgets_ms {
                Some(b) => Some(verify_with_budget(&ckpt.net, &ckpt.params, &x, y[0], eps, clip, &source, dual.step_size, b)?),
                None => None,
            };
            Ok(Certificate {
                index: i,
                label: y[0],
                max_zeta: ver.max_zeta(),
                verified_robust: ver.verified_robust,
                per_class: ver.per_class,
                time_ms,
                budget_max_zeta: budget_curve.as_ref().map(|c| c.max_bounds()),
                budget_curve,
            })
        })
        .collect::<Result<_>>()?;
    let n = certificates.len();
    let certified = certificates.iter().filter(|c| c.verified_robust).count();
    let result = VerifyResult {
        epsilon: eps,
        dual_source: source.label(),
        budgets_ms,
        n,
        certified,
        verified_err: if n == 0 { 0.0 } else { 1.0 - certified as f64 / n as f64 },
        certificates,
    };
    println!("certified {certified}/{n} at eps {eps} ({})", result.dual_source);
    let path = out.unwrap_or_else(|| cfg.out_dir.join("certificates.json"));
    write_artifact(&path, "verify", cfg, Some(&cref), result)
}

#[derive(Serialize)]
struct AttackRecord {
    index: usize,
    label: usize,
    success: bool,
    loss: f64,
}

#[derive(Serialize)]
struct AttackSummary {
    epsilon: f64,
    n: usize,
    successes: usize,
    records: Vec<AttackRecord>,
}

pub fn attack_cmd(cfg: &ExperimentConfig, checkpoint: &Path, subset: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let Loaded { ckpt, cref, data } = load(cfg, checkpoint, subset)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(100).collect();
    let per_chunk: Vec<Vec<AttackRecord>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, chunk)| {
            let (x, y) = data.batch::<f64>(chunk);
            let attack = vericert::attack::AttackConfig {
                seed: cfg.attack.seed.wrapping_add(ci as u64),
                ..cfg.attack.clone()
            };
            let r = pgd_attack(&ckpt.net, &ckpt.params, &x, &y, &attack, cfg.clip())?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(b, &index)| AttackRecord {
                    index,
                    label: y[b],
                    success: r.success[b],
                    loss: r.loss[b],
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<AttackRecord> = per_chunk.into_iter().flatten().collect();
    let successes = records.iter().filter(|r| r.success).count();
    println!("attack succeeded on {successes}/{} at eps {}", records.len(), cfg.attack.eps);
    let result = AttackSummary {
        epsilon: cfg.attack.eps,
        n: records.len(),
        successes,
        records,
    };
    let path = out.unwrap_or_else(|| cfg.out_dir.join("attack.json"));
    write_artifact(&path, "attack", cfg, Some(&cref), result)
}

fn print_report(r: &EvalReport) {
    println!(
        "n {} eps {} nominal {:.4} pgd {:.4} verified {:.4} mean_max_zeta {:.4} conflicts {}",
        r.n, r.eps, r.nominal_err, r.pgd_err, r.verified_err, r.mean_max_zeta, r.conflicts
    );
}

pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path, subset: Option<usize>, dual: DualArgs, out: Option<PathBuf>) -> Result<()> {
    let Loaded { ckpt, cref, data } = load(cfg, checkpoint, subset)?;
    let opts = EvalOptions {
        eps: cfg.train.eps_target,
        clip: cfg.clip(),
        attack: cfg.attack.clone(),
        source: dual.bound_source(),
        batch_size: 100,
    };
    let report = evaluate(&ckpt.net, &ckpt.params, ckpt.verifier.as_ref(), &data, &opts)?;
    print_report(&report);
    let path = out.unwrap_or_else(|| cfg.out_dir.join("eval.json"));
    write_artifact(&path, "eval", cfg, Some(&cref), &report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub nominal_err: f64,
    pub pgd_err: f64,
    pub verified_err: f64,
    pub mean_max_zeta: f64,
    pub checkpoint_sha256: String,
}

pub fn sweep_kappa_cmd(cfg: &ExperimentConfig, kappas: &[f64], dual: DualArgs) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let mut run = cfg.clone();
        run.train.kappa = kappa;
        run.out_dir = cfg.out_dir.join(format!("kappa_{kappa}"));
        let run = run.resolve()?;
        let cref = train_cmd(&run)?;
        let Loaded { ckpt, data, .. } = load(&run, &cref.path, Some(run.eval_subset))?;
        let opts = EvalOptions {
            eps: run.train.eps_target,
            clip: run.clip(),
            attack: run.attack.clone(),
            source: dual.bound_source(),
            batch_size: 100,
        };
        let report = evaluate(&ckpt.net, &ckpt.params, ckpt.verifier.as_ref(), &data, &opts)?;
        print!("kappa {kappa}: ");
        print_report(&report);
        rows.push(SweepRow {
            kappa,
            nominal_err: report.nominal_err,
            pgd_err: report.pgd_err,
            verified_err: report.verified_err,
            mean_max_zeta: report.mean_max_zeta,
            checkpoint_sha256: cref.sha256,
        });
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_artifact(&cfg.out_dir.join("sweep.json"), "sweep-kappa", cfg, None, &rows)?;
    Ok(rows)
}

#[derive(Serialize)]
struct OracleRow {
    target: usize,
    oracle_value: f64,
    witness: Vec<f64>,
    evaluated: usize,
    dual_bound: f64,
    /// `oracle_value <= dual_bound + 1e-6`.
    consistent: bool,
}

#[derive(Serialize)]
struct OracleSummary {
    index: usize,
    label: usize,
    epsilon: f64,
    mode: &'static str,
    rows: Vec<OracleRow>,
}

#[allow(clippy::too_many_arguments)]
pub fn oracle_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    index: usize,
    target: Option<usize>,
    samples: usize,
    resolution: usize,
    dual: DualArgs,
    out: Option<PathBuf>,
) -> Result<()> {
    let Loaded { ckpt, cref, data } = load(cfg, checkpoint, None)?;
    if index >= data.len() {
        bail!("index {index} out of range for {} test examples", data.len());
    }
    let eps = cfg.train.eps_target;
    let clip = cfg.clip();
    let (x, y) = data.batch::<f64>(&[index]);
    let label = y[0];
    let classes = ckpt.net.classes;
    let targets: Vec<usize> = match target {
        Some(t) if t >= classes || t == label => bail!("target {t} must be a class other than the label {label}"),
        Some(t) => vec![t],
        None => (0..classes).filter(|&t| t != label).collect(),
    };
    let x_flat = x.to_f64_vec();
    let grid = x_flat.len() <= MAX_GRID_DIM;
    let attack = pgd_attack(&ckpt.net, &ckpt.params, &x, &y, &cfg.attack, clip)?;
    let extra = vec![attack.x_adv.to_f64_vec()];
    let source = resolve_source(&dual, &ckpt)?;
    let ver = verify_example(&ckpt.net, &ckpt.params, &x, label, eps, clip, &source)?;
    let mut rows = Vec::with_capacity(targets.len());
    for t in targets {
        let spec = LinearSpec::robustness(label, t, classes);
        let found = if grid {
            grid_max(&ckpt.net, &ckpt.params, &x_flat, eps, clip, &spec.c, spec.d, resolution)?
        } else {
            corner_and_random_max(&ckpt.net, &ckpt.params, &x_flat, eps, clip, &spec.c, spec.d, samples, &extra, cfg.seed)?
        };
        let bound = ver
            .per_class
            .iter()
            .find(|c| c.target == t)
            .map(|c| c.zeta)
            .context("verifier returned no bound for target")?;
        rows.push(OracleRow {
            target: t,
            oracle_value: found.value,
            consistent: found.value <= bound + 1e-6,
            witness: found.witness,
            evaluated: found.evaluated,
            dual_bound: bound,
        });
    }
    for r in &rows {
        println!(
            "target {} oracle {:.6} bound {:.6} {}",
            r.target,
            r.oracle_value,
            r.dual_bound,
            if r.consistent { "ok" } else { "VIOLATION" }
        );
    }
    let violations = rows.iter().filter(|r| !r.consistent).count();
    let result = OracleSummary {
        index,
        label,
        epsilon: eps,
        mode: if grid { "grid" } else { "corners+random" },
        rows,
    };
    let path = out.unwrap_or_else(|| cfg.out_dir.join("oracle.json"));
    write_artifact(&path, "oracle", cfg, Some(&cref), result)?;
    if violations > 0 {
        bail!("{violations} oracle values exceed the dual bound");
    }
    Ok(())
}
