//! Run configuration documents and the shipped presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, Norm};
use crate::data::{load_mnist_split, Dataset};
use crate::dilemma::{sample_dataset, DilemmaSpec};
use crate::error::{Error, Result};
use crate::model::BackboneSpec;
use crate::training::{LossConfig, MaskDenominator, TrainConfig};

/// Where training and evaluation samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX files `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` under
    /// `dir`, or under `$AAT_DATA_DIR` when `dir` is absent.
    Mnist {
        #[serde(default)]
        dir: Option<String>,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    /// Draws from the discrete feature distribution.
    Dilemma {
        spec: DilemmaSpec,
        train: usize,
        test: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Seed of the natural/adversarial mixture shuffle.
    pub mixture_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { mixture_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: BackboneSpec,
    pub train: TrainConfig,
    pub attack_test: Vec<AttackConfig>,
    #[serde(default)]
    pub eval: EvalOptions,
    pub data: DataSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub const PRESETS: [&str; 5] = [
    "mnist-st-desk",
    "mnist-aat-desk",
    "mnist-aat++-desk",
    "dilemma-default",
    "mnist-full",
];

/// Desk-scale optimizer settings for MNIST. Standard training tolerates a
/// larger step; the asymmetric objectives diverge above about 0.05.
const DESK_ST_LR: f64 = 0.05;
const DESK_LR: f64 = 0.02;
const DESK_EPOCHS: usize = 5;

fn mnist(loss: LossConfig, lr: f64, epochs: usize, milestones: Vec<usize>, train_subset: Option<usize>) -> RunConfig {
    RunConfig {
        model: BackboneSpec::mnist_cnn(),
        train: TrainConfig {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            milestones,
            batch_size: 128,
            seed: 0,
            attack_train: AttackConfig::mnist_train(),
            loss,
            mask_denominator: MaskDenominator::Masked,
        },
        attack_test: vec![AttackConfig::mnist_test()],
        eval: EvalOptions::default(),
        data: DataSource::Mnist { dir: None, train_subset, test_subset: None, subset_seed: 0 },
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "mnist-st-desk" => mnist(LossConfig::st_only(), DESK_ST_LR, DESK_EPOCHS, vec![], Some(10_000)),
            "mnist-aat-desk" => mnist(LossConfig::aat(), DESK_LR, DESK_EPOCHS, vec![], Some(10_000)),
            "mnist-aat++-desk" => mnist(LossConfig::aat_plus_plus(), DESK_LR, DESK_EPOCHS, vec![], Some(10_000)),
            "mnist-full" => mnist(LossConfig::aat_plus_plus(), 0.1, 56, vec![50, 55], None),
            "dilemma-default" => {
                let spec = DilemmaSpec::default();
                let mut attack = AttackConfig::new(Norm::Linf, spec.epsilon, spec.epsilon / 4.0, 10);
                attack.clamp = None;
                RunConfig {
                    // Unit-scale features; the budget still applies to raw inputs.
                    model: BackboneSpec::dilemma_mlp(spec.d)
                        .with_input_scale(spec.eta.iter().map(|e| 1.0 / e).collect()),
                    train: TrainConfig {
                        // 0.05 collapses the full objective to a constant predictor.
                        lr: 0.02,
                        momentum: 0.9,
                        weight_decay: 0.0,
                        epochs: 5,
                        milestones: vec![],
                        batch_size: 128,
                        seed: 0,
                        attack_train: attack.clone(),
                        loss: LossConfig::aat_plus_plus(),
                        mask_denominator: MaskDenominator::Masked,
                    },
                    attack_test: vec![attack],
                    eval: EvalOptions::default(),
                    data: DataSource::Dilemma { spec, train: 20_000, test: 10_000, seed: 0 },
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every section; all failures are reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        for a in &self.attack_test {
            a.validate().map_err(as_config)?;
        }
        match &self.data {
            DataSource::Mnist { train_subset, test_subset, .. } => {
                if *train_subset == Some(0) || *test_subset == Some(0) {
                    return Err(Error::Config("subset sizes must be positive".into()));
                }
                if self.model.input_shape() != [1, 28, 28] {
                    return Err(Error::Config(format!(
                        "mnist data needs a [1, 28, 28] input, model takes {:?}",
                        self.model.input_shape()
                    )));
                }
            }
            DataSource::Dilemma { spec, train, test, .. } => {
                spec.validate().map_err(as_config)?;
                if *train == 0 || *test == 0 {
                    return Err(Error::Config("dilemma sample counts must be positive".into()));
                }
                if self.model.input_shape() != [spec.d] || self.model.num_classes() != 2 {
                    return Err(Error::Config("dilemma data needs a d-input two-class model".into()));
                }
            }
        }
        Ok(())
    }

    /// Loads one split. `mnist_dir` is only read for IDX data; `subset`
    /// replaces the configured sample count.
    pub fn load_split(&self, split: Split, mnist_dir: &Path, subset: Option<usize>) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Mnist { train_subset, test_subset, subset_seed, .. } => {
                let (name, configured) = match split {
                    Split::Train => ("train", *train_subset),
                    Split::Test => ("t10k", *test_subset),
                };
                let full = load_mnist_split(mnist_dir, name)?;
                match subset.or(configured) {
                    Some(k) => full.subset(k, *subset_seed),
                    None => full,
                }
            }
            DataSource::Dilemma { spec, train, test, seed } => {
                let (n, s, name) = match split {
                    Split::Train => (subset.unwrap_or(*train), *seed, "train"),
                    Split::Test => (subset.unwrap_or(*test), seed.wrapping_add(1), "test"),
                };
                sample_dataset(spec, n, s)?.to_dataset(name)?
            }
        };
        if ds.is_empty() {
            return Err(Error::Format("dataset is empty".into()));
        }
        Ok(ds)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
