use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NernError, Result};
use crate::predictor::{NernPredictor, PredictorConfig};
use crate::smoothness::{map_hash, PermutationMap, PermutationVariant};
use crate::trainer::{MetricsRow, TrainConfig};
use crate::zoo::{ArchCatalog, OriginalNetwork, OriginalTrainConfig, OriginalTrainReport};

use super::config_hash;

pub const MANIFEST_VERSION: u32 = 1;
pub const ORIGINAL_MANIFEST: &str = "original.json";
pub const PREDICTOR_MANIFEST: &str = "predictor.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalManifest {
    pub version: u32,
    pub catalog: ArchCatalog,
    pub classes: usize,
    pub data_seed: u64,
    pub train: OriginalTrainConfig,
    pub report: Option<OriginalTrainReport>,
    pub config_hash: String,
}

impl OriginalManifest {
    pub fn new(
        net: &OriginalNetwork,
        data_seed: u64,
        train: OriginalTrainConfig,
        report: Option<OriginalTrainReport>,
    ) -> Self {
        let config_hash = config_hash(&(&net.catalog, data_seed, &train));
        Self {
            version: MANIFEST_VERSION,
            catalog: net.catalog.clone(),
            classes: net.classes(),
            data_seed,
            train,
            report,
            config_hash,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorManifest {
    pub version: u32,
    pub arch: String,
    pub seed: u64,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub variant: PermutationVariant,
    /// Hash of the permutation map the predictor was trained against.
    pub permutation_hash: String,
    pub original_hash: String,
    pub final_metrics: Option<MetricsRow>,
    pub config_hash: String,
}

impl PredictorManifest {
    pub fn new(
        original: &OriginalManifest,
        predictor: PredictorConfig,
        train: TrainConfig,
        map: &PermutationMap,
        final_metrics: Option<MetricsRow>,
    ) -> Result<Self> {
        let permutation_hash = map_hash(map)?;
        let config_hash = config_hash(&(&original.config_hash, &predictor, &train, &permutation_hash));
        Ok(Self {
            version: MANIFEST_VERSION,
            arch: original.catalog.name.clone(),
            seed: train.seed,
            predictor,
            train,
            variant: map.variant,
            permutation_hash,
            original_hash: original.config_hash.clone(),
            final_metrics,
            config_hash,
        })
    }

    /// Fails unless `map` is the permutation this predictor was trained with.
    pub fn check_permutation(&self, map: &PermutationMap) -> Result<()> {
        let hash = map_hash(map)?;
        if hash != self.permutation_hash {
            return Err(NernError::ArtifactMismatch(format!(
                "permutation hash {hash} does not match checkpoint hash {}",
                self.permutation_hash
            )));
        }
        Ok(())
    }

    pub fn check_original(&self, original: &OriginalManifest) -> Result<()> {
        if original.config_hash != self.original_hash {
            return Err(NernError::ArtifactMismatch(format!(
                "original network {} does not match checkpoint original {}",
                original.config_hash, self.original_hash
            )));
        }
        Ok(())
    }
}

fn check_version(found: u32) -> Result<()> {
    if found != MANIFEST_VERSION {
        return Err(NernError::ArtifactMismatch(format!(
            "manifest version {found}, expected {MANIFEST_VERSION}"
        )));
    }
    Ok(())
}

pub fn save_original(dir: &Path, net: &OriginalNetwork, manifest: &OriginalManifest) -> Result<()> {
    net.save(dir)?;
    fs::write(dir.join(ORIGINAL_MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_original(dir: &Path) -> Result<(OriginalNetwork, OriginalManifest)> {
    let manifest: OriginalManifest = serde_json::from_slice(&fs::read(dir.join(ORIGINAL_MANIFEST))?)?;
    check_version(manifest.version)?;
    let net = OriginalNetwork::load(dir, manifest.catalog.clone())?;
    Ok((net, manifest))
}

pub fn save_predictor(dir: &Path, predictor: &NernPredictor, manifest: &PredictorManifest) -> Result<()> {
    predictor.save(dir)?;
    fs::write(dir.join(PREDICTOR_MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_predictor(dir: &Path) -> Result<(NernPredictor, PredictorManifest)> {
    let manifest: PredictorManifest = serde_json::from_slice(&fs::read(dir.join(PREDICTOR_MANIFEST))?)?;
    check_version(manifest.version)?;
    let predictor = NernPredictor::load(dir, manifest.predictor)?;
    Ok((predictor, manifest))
}
