//! Experiment configuration: a versioned JSON schema, presets, hashing and
//! per-purpose seed derivation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{allocate_counts, sample_dataset, sample_with_counts, Dataset, GaussianMixture};
use crate::error::{Error, Result};
use crate::mixup::MixupConfig;
use crate::model::{Activation, HeadKind, ModelShape, Schedule, TrainConfig};
use crate::priors::{
    lt_exponential_prior, make_ensemble_spec, pareto_prior, EnsembleSpec, LabelDistribution,
    LambdaVector,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub ensemble: EnsembleConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub mixup: MixupConfig,
    pub eval: EvalSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian classes with means on a circle (first two axes).
    Synthetic {
        classes: usize,
        dim: usize,
        radius: f64,
        sigma: f64,
        prior: PriorProfile,
        n_train: usize,
        n_test_per_class: usize,
        #[serde(default)]
        allocation: Allocation,
    },
    /// Pre-existing CSV files, relative to the workdir.
    Csv {
        train: String,
        test: String,
        #[serde(default)]
        classes: Option<usize>,
    },
}

/// How synthetic class counts are chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    /// Counts proportional to the prior, rounded by largest remainder.
    #[default]
    Exact,
    /// Labels drawn i.i.d. from the prior.
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorProfile {
    Exponential { rho: f64 },
    Pareto { alpha: f64 },
    Explicit { probs: Vec<f64> },
}

impl PriorProfile {
    pub fn build(&self, classes: usize) -> Result<LabelDistribution> {
        match self {
            PriorProfile::Exponential { rho } => lt_exponential_prior(classes, *rho),
            PriorProfile::Pareto { alpha } => pareto_prior(classes, *alpha),
            PriorProfile::Explicit { probs } => {
                if probs.len() != classes {
                    return Err(Error::Config(format!(
                        "explicit prior has {} entries for {classes} classes",
                        probs.len()
                    )));
                }
                LabelDistribution::from_weights(probs)
            }
        }
    }
}

/// A λ entry: one scalar shared by all classes, or a per-class vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaEntry {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub lambdas: Vec<LambdaEntry>,
}

impl EnsembleConfig {
    pub fn build(&self, classes: usize) -> Result<EnsembleSpec> {
        if self.lambdas.is_empty() {
            return Err(Error::Config("ensemble.lambdas must not be empty".into()));
        }
        let lams = self
            .lambdas
            .iter()
            .map(|e| match e {
                LambdaEntry::Scalar(v) => LambdaVector::constant(classes, *v),
                LambdaEntry::Vector(v) if v.len() == classes => LambdaVector::new(v.clone()),
                LambdaEntry::Vector(v) => Err(Error::Config(format!(
                    "λ vector has {} entries for {classes} classes",
                    v.len()
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        make_ensemble_spec(lams)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub head: HeadKind,
}

/// Optimizer settings; the seed and mixup live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Imbalance ratios of the forward and backward shifted test sets.
    pub shifted_irs: Vec<f64>,
    pub known_prior: bool,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub points: usize,
    pub tolerance: f64,
    /// Extra random λ multisets checked besides the configured ensemble.
    pub random_sets: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec {
            points: 1000,
            tolerance: 1e-9,
            random_sets: 10,
        }
    }
}

/// Seeds for independent uses of the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    TrainData,
    TestData,
    Init,
    Train,
    Eval,
    Verify,
}

/// SplitMix64 finalizer over `seed` and a purpose tag.
pub fn derive_seed(seed: u64, purpose: SeedPurpose) -> u64 {
    let tag = purpose as u64 + 1;
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.ensemble.lambdas.is_empty() {
            return Err(Error::Config("ensemble.lambdas must not be empty".into()));
        }
        if let DatasetSpec::Synthetic {
            classes,
            dim,
            radius,
            sigma,
            prior,
            n_train,
            n_test_per_class,
            ..
        } = &self.dataset
        {
            if *classes == 0 || *dim == 0 || *n_train == 0 || *n_test_per_class == 0 {
                return Err(Error::Config(
                    "dataset: classes, dim, n_train and n_test_per_class must be positive".into(),
                ));
            }
            if !(radius.is_finite() && sigma.is_finite() && *sigma > 0.0) {
                return Err(Error::Config(
                    "dataset: radius and sigma must be finite, sigma > 0".into(),
                ));
            }
            prior.build(*classes)?;
            self.ensemble.build(*classes)?;
        }
        if self.eval.bins == 0 {
            return Err(Error::Config("eval.bins must be positive".into()));
        }
        if self
            .eval
            .shifted_irs
            .iter()
            .any(|r| !(r.is_finite() && *r >= 1.0))
        {
            return Err(Error::Config("eval.shifted_irs must be ≥ 1".into()));
        }
        if self.verify.points == 0 || self.verify.tolerance.is_nan() || self.verify.tolerance <= 0.0
        {
            return Err(Error::Config(
                "verify: points and tolerance must be positive".into(),
            ));
        }
        self.train_config().validate()
    }

    /// Lowercase hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: t.schedule.clone(),
            warmup_epochs: t.warmup_epochs,
            seed: derive_seed(self.seed, SeedPurpose::Train),
            mixup: self.mixup,
        }
    }

    pub fn model_shape(&self, input_dim: usize, classes: usize, experts: usize) -> ModelShape {
        ModelShape {
            input_dim,
            depth: self.model.depth,
            hidden: self.model.hidden,
            activation: self.model.activation,
            head: self.model.head,
            classes,
            experts,
        }
    }

    /// The generating mixture of a synthetic dataset, with the training prior.
    pub fn mixture(&self) -> Result<Option<GaussianMixture>> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                radius,
                sigma,
                prior,
                ..
            } => Ok(Some(GaussianMixture::on_circle(
                *dim,
                *radius,
                *sigma,
                prior.build(*classes)?,
            )?)),
            DatasetSpec::Csv { .. } => Ok(None),
        }
    }

    /// Train and (balanced) test sets of a synthetic dataset.
    pub fn synthetic_data(&self) -> Result<Option<(Dataset, Dataset)>> {
        let DatasetSpec::Synthetic {
            classes,
            n_train,
            n_test_per_class,
            allocation,
            ..
        } = &self.dataset
        else {
            return Ok(None);
        };
        let mix = self.mixture()?.expect("synthetic");
        let balanced = mix.with_prior(LabelDistribution::uniform(*classes)?)?;
        let train_seed = derive_seed(self.seed, SeedPurpose::TrainData);
        let test_seed = derive_seed(self.seed, SeedPurpose::TestData);
        let data = match allocation {
            Allocation::Exact => (
                sample_with_counts(&mix, &allocate_counts(mix.prior(), *n_train), train_seed)?,
                sample_with_counts(&balanced, &vec![*n_test_per_class; *classes], test_seed)?,
            ),
            Allocation::Iid => (
                sample_dataset(&mix, *n_train, train_seed)?,
                sample_dataset(&balanced, n_test_per_class * classes, test_seed)?,
            ),
        };
        Ok(Some(data))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar-like" => Ok(cifar_like()),
            "imagenet-like" => Ok(imagenet_like()),
            "quick" => Ok(quick()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }
}

pub const PRESETS: &[&str] = &["cifar-like", "imagenet-like", "quick"];

/// Three experts λ ∈ {1, 0, -1}, mixup α = 0.4, SGD with momentum 0.9,
/// weight decay 5e-4, five warmup epochs and a cosine schedule.
fn cifar_like() -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        seed: 0,
        dataset: DatasetSpec::Synthetic {
            classes: 10,
            dim: 2,
            radius: 3.0,
            sigma: 1.0,
            prior: PriorProfile::Exponential { rho: 100.0 },
            n_train: 6000,
            n_test_per_class: 1000,
            allocation: Allocation::Exact,
        },
        ensemble: EnsembleConfig {
            lambdas: vec![
                LambdaEntry::Scalar(1.0),
                LambdaEntry::Scalar(0.0),
                LambdaEntry::Scalar(-1.0),
            ],
        },
        model: ModelConfig {
            depth: 1,
            hidden: 32,
            activation: Activation::Relu,
            head: HeadKind::Linear,
        },
        train: TrainSettings {
            epochs: 60,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            warmup_epochs: 5,
        },
        mixup: MixupConfig::with_alpha(0.4),
        eval: EvalSpec {
            shifted_irs: vec![2.0, 5.0, 10.0, 25.0, 50.0],
            known_prior: true,
            bins: crate::metrics::DEFAULT_BINS,
        },
        verify: VerifySpec::default(),
        output_dir: "out".into(),
    }
}

/// Many classes with a Pareto profile, cosine heads, mixup α = 0.2.
fn imagenet_like() -> ExperimentConfig {
    let mut cfg = cifar_like();
    cfg.dataset = DatasetSpec::Synthetic {
        classes: 50,
        dim: 4,
        radius: 4.0,
        sigma: 1.0,
        prior: PriorProfile::Pareto { alpha: 6.0 },
        n_train: 20000,
        n_test_per_class: 200,
        allocation: Allocation::Exact,
    };
    cfg.model.hidden = 64;
    cfg.model.head = HeadKind::Cosine { kappa: 32.0 };
    cfg.mixup = MixupConfig::with_alpha(0.2);
    cfg.train.weight_decay = 5e-4;
    cfg.train.lr = 0.1;
    cfg
}

/// A seconds-long run used by tests and smoke checks.
fn quick() -> ExperimentConfig {
    let mut cfg = cifar_like();
    cfg.dataset = DatasetSpec::Synthetic {
        classes: 3,
        dim: 2,
        radius: 3.0,
        sigma: 1.0,
        prior: PriorProfile::Exponential { rho: 10.0 },
        n_train: 600,
        n_test_per_class: 200,
        allocation: Allocation::Exact,
    };
    cfg.model.hidden = 8;
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 64;
    cfg.verify.points = 200;
    cfg.verify.random_sets = 3;
    cfg
}
