use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingConfig, DEFAULT_FREQUENCIES, SMOOTH_BASE};
use crate::error::{NernError, Result};
use crate::smoothness::codec_hex;
use crate::smoothness::PermutationVariant;
use crate::trainer::TrainConfig;
use crate::zoo::{OriginalTrainConfig, DESK3};

pub const CONFIG_VERSION: u32 = 1;

/// How kernel smoothness is encouraged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SmoothnessMode {
    None,
    /// Train the original with `lambda * L_smooth`.
    Regularized { lambda: f64 },
    /// Reorder the prediction sequence with greedy permutations.
    Permuted { variant: PermutationVariant },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OriginalSection {
    pub seed: u64,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for OriginalSection {
    fn default() -> Self {
        let d = OriginalTrainConfig::default();
        Self {
            seed: d.seed,
            data_seed: 0,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSection {
    pub base: f64,
    pub frequencies: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            base: SMOOTH_BASE,
            frequencies: DEFAULT_FREQUENCIES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppsSection {
    pub prune_factors: Vec<f64>,
    /// Evaluation samples averaged for activation maps.
    pub probe_size: usize,
}

impl Default for AppsSection {
    fn default() -> Self {
        Self {
            prune_factors: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            probe_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub arch: String,
    pub hidden: usize,
    pub embedding: EmbeddingSection,
    pub smoothness: SmoothnessMode,
    pub original: OriginalSection,
    pub train: TrainConfig,
    pub apps: AppsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: "default".into(),
            arch: DESK3.into(),
            hidden: 64,
            embedding: EmbeddingSection::default(),
            smoothness: SmoothnessMode::None,
            original: OriginalSection::default(),
            train: TrainConfig::default(),
            apps: AppsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NernError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NernError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(NernError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.arch != DESK3 {
            return Err(NernError::Config(format!(
                "only `{DESK3}` can be trained; `{}` is a size-accounting catalog",
                self.arch
            )));
        }
        if self.hidden == 0 {
            return Err(NernError::Config("hidden size must be >= 1".into()));
        }
        match self.smoothness {
            SmoothnessMode::Regularized { lambda } if !(lambda.is_finite() && lambda > 0.0) => {
                return Err(NernError::Config("regularized mode needs lambda > 0".into()))
            }
            SmoothnessMode::Permuted {
                variant: PermutationVariant::None,
            } => return Err(NernError::Config("permuted mode needs a variant other than none".into())),
            _ => {}
        }
        self.embedding_config()?;
        self.train.validate()
    }

    pub fn embedding_config(&self) -> Result<EmbeddingConfig> {
        EmbeddingConfig::with_base(self.embedding.base, self.embedding.frequencies)
    }

    pub fn original_train_config(&self) -> OriginalTrainConfig {
        OriginalTrainConfig {
            lambda: match self.smoothness {
                SmoothnessMode::Regularized { lambda } => lambda,
                _ => 0.0,
            },
            epochs: self.original.epochs,
            batch_size: self.original.batch_size,
            lr: self.original.lr,
            seed: self.original.seed,
        }
    }

    pub fn permutation_variant(&self) -> PermutationVariant {
        match self.smoothness {
            SmoothnessMode::Permuted { variant } => variant,
            _ => PermutationVariant::None,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    codec_hex(&Sha256::digest(json))[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let sparse = ExperimentConfig::from_toml("version = 1\nhidden = 32\n[smoothness]\nmode = \"permuted\"\nvariant = \"in_filter\"\n").unwrap();
        assert_eq!(sparse.hidden, 32);
        assert_eq!(sparse.permutation_variant(), PermutationVariant::InFilter);
        assert_eq!(sparse.train, TrainConfig::default());
    }

    #[test]
    fn every_documented_key_parses_to_the_defaults() {
        let text = r#"
version = 1
name = "default"
arch = "desk3"
hidden = 64
[embedding]
base = 0.76
frequencies = 40
[smoothness]
mode = "none"
[original]
seed = 0
data_seed = 0
epochs = 30
batch_size = 64
lr = 0.01
[train]
alpha = 1.0
beta = 1.0
recon_weight = 1.0
lr = 0.005
iterations = 5000
cosine = true
task_batch = 64
noise_inputs = false
seed = 0
distill_grad = "full"
recon_kind = "norm"
optimizer = "adam"
eval_every = 0
[train.sampling]
kind = "magnitude_mixed"
batch_size = 256
p_uni = 0.8
[apps]
prune_factors = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
probe_size = 64
"#;
        assert_eq!(ExperimentConfig::from_toml(text).unwrap(), ExperimentConfig::default());
        let partial = ExperimentConfig::from_toml("[train.sampling]\nbatch_size = 32").unwrap();
        assert_eq!(partial.train.sampling.p_uni, 0.8);
    }

    #[test]
    fn validation_failures() {
        for bad in [
            "version = 2",
            "arch = \"resnet20_cifar\"",
            "hidden = 0",
            "[smoothness]\nmode = \"regularized\"\nlambda = 0.0",
            "[smoothness]\nmode = \"permuted\"\nvariant = \"none\"",
            "[train]\nalpha = -1.0",
            "unknown_key = [",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(NernError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn regularized_lambda_reaches_the_original() {
        let cfg = ExperimentConfig::from_toml("[smoothness]\nmode = \"regularized\"\nlambda = 0.01").unwrap();
        assert_eq!(cfg.original_train_config().lambda, 0.01);
        assert_eq!(ExperimentConfig::default().original_train_config().lambda, 0.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
