//! Experiment configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use vericert::attack::AttackConfig;
use vericert::data::{load_mnist, make_synthetic_margin_split, make_synthetic_moons, Split};
use vericert::network::NetworkSpec;
use vericert::train::{DualLossMode, TrainConfig};
use vericert::verifier::{VerifierKind, VerifierSpec};

pub const DATASETS: [&str; 3] = ["mnist", "synthetic-margin", "synthetic-moons"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub name: String,
    /// Directory holding the MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    /// Synthetic set sizes.
    pub n_train: usize,
    pub n_test: usize,
    pub margin: f64,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "synthetic-margin".into(),
            data_dir: None,
            n_train: 2000,
            n_test: 1000,
            margin: 0.2,
            noise: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn is_image(&self) -> bool {
        self.name == "mnist"
    }

    pub fn load(&self, seed: u64) -> Result<Split> {
        Ok(match self.name.as_str() {
            "mnist" => {
                let dir = self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
                load_mnist(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))?
            }
            "synthetic-margin" => make_synthetic_margin_split(self.n_train, self.n_test, self.margin, seed)?.0,
            "synthetic-moons" => Split {
                train: make_synthetic_moons(self.n_train, self.noise, seed)?,
                test: make_synthetic_moons(self.n_test, self.noise, seed ^ 0x7465_7374)?,
            },
            other => bail!("unknown dataset {other:?}; expected one of {DATASETS:?}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub arch: String,
    pub verifier: VerifierKind,
    pub per_target_duals: bool,
    /// Defaults to on for image data and off for synthetic data.
    pub clip_input: Option<bool>,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval_subset: usize,
    pub out_dir: PathBuf,
    /// Seeds initialisation, data order, synthetic data and attacks.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            arch: "small-mlp".into(),
            verifier: VerifierKind::Direct,
            per_target_duals: false,
            clip_input: None,
            train: TrainConfig::default(),
            attack: AttackConfig::new(0.1),
            eval_subset: 1000,
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills derived fields so the echoed config is complete.
    pub fn resolve(mut self) -> Result<Self> {
        if !DATASETS.contains(&self.dataset.name.as_str()) {
            bail!("unknown dataset {:?}; expected one of {DATASETS:?}", self.dataset.name);
        }
        let clip = self.clip_input.unwrap_or(self.dataset.is_image());
        self.clip_input = Some(clip);
        self.train.clip_input = clip;
        self.train.seed = self.seed;
        self.attack.seed = self.seed;
        self.attack.eps = self.train.eps_target;
        self.train.eval_attack.eps = self.train.eps_target;
        self.train.eval_attack.seed = self.seed;
        self.train.eval_subset = self.eval_subset;
        self.train.validate()?;
        self.attack.validate()?;
        Ok(self)
    }

    pub fn clip(&self) -> Option<(f64, f64)> {
        self.clip_input.unwrap_or(self.dataset.is_image()).then_some((0.0, 1.0))
    }

    pub fn verifier_spec(&self) -> VerifierSpec {
        VerifierSpec {
            per_target: self.per_target_duals,
            ..VerifierSpec::new(self.verifier)
        }
    }

    pub fn network(&self, split: &Split) -> Result<NetworkSpec> {
        Ok(NetworkSpec::by_name(&self.arch, split.train.input_shape.clone(), split.train.classes)?)
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct ExperimentArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist, synthetic-margin or synthetic-moons.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// small-mlp, small-conv or mlp:H1,H2[:relu|sigmoid|tanh].
    #[arg(long)]
    pub arch: Option<String>,
    /// constant, direct or backward-forward.
    #[arg(long)]
    pub verifier: Option<VerifierKind>,
    #[arg(long)]
    pub per_target_duals: bool,
    /// Clip the perturbation box to [0, 1].
    #[arg(long)]
    pub clip_input: Option<bool>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// max-hinge, softplus-max, mean-hinge or softplus-sum.
    #[arg(long)]
    pub mode: Option<DualLossMode>,
    #[arg(long)]
    pub dual_l1: Option<f64>,
    #[arg(long)]
    pub anneal_fraction: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_subset: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentArgs {
    pub fn build(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        set!(dataset => dataset.name);
        set!(n_train => dataset.n_train);
        set!(n_test => dataset.n_test);
        set!(margin => dataset.margin);
        set!(arch => arch);
        set!(verifier => verifier);
        set!(epsilon => train.eps_target);
        set!(kappa => train.kappa);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(lr => train.lr);
        set!(mode => train.mode);
        set!(dual_l1 => train.dual_l1);
        set!(anneal_fraction => train.anneal_fraction);
        set!(eval_subset => eval_subset);
        set!(seed => seed);
        set!(out => out_dir);
        if self.data_dir.is_some() {
            c.dataset.data_dir = self.data_dir.clone();
        }
        if self.clip_input.is_some() {
            c.clip_input = self.clip_input;
        }
        if self.max_steps.is_some() {
            c.train.max_steps = self.max_steps;
        }
        if self.grad_clip.is_some() {
            c.train.grad_clip = self.grad_clip;
        }
        if self.eval_every.is_some() {
            c.train.eval_every = self.eval_every;
        }
        if self.checkpoint_every.is_some() {
            c.train.checkpoint_every = self.checkpoint_every;
        }
        if self.per_target_duals {
            c.per_target_duals = true;
        }
        c.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"arch": "mlp:8", "seed": 3, "train": {"kappa": 0.2, "epochs": 4}}"#).unwrap();
        let args = ExperimentArgs {
            config: Some(path),
            kappa: Some(0.9),
            ..Default::default()
        };
        let c = args.build().unwrap();
        assert_eq!(c.arch, "mlp:8");
        assert_eq!(c.train.kappa, 0.9);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.clip_input, Some(false));
    }

    #[test]
    fn clipping_defaults_by_dataset() {
        let c = ExperimentArgs {
            dataset: Some("mnist".into()),
            ..Default::default()
        }
        .build()
        .unwrap();
        assert_eq!(c.clip(), Some((0.0, 1.0)));
    }

    #[test]
    fn rejects_unknown_dataset_and_bad_kappa() {
        let bad = ExperimentArgs {
            dataset: Some("cifar".into()),
            ..Default::default()
        };
        assert!(bad.build().is_err());
        let bad = ExperimentArgs {
            kappa: Some(1.5),
            ..Default::default()
        };
        assert!(bad.build().is_err());
    }
}
