use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Checkpoint;
use crate::data::{read_real_matrix, write_csv_rows, RegionDataset};
use crate::error::{CheckpointError, DataError};
use crate::model::{ModelConfig, PreparedData};
use crate::numerics::Tensor;

pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const EMBEDDINGS_META_FILE: &str = "embeddings.meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub dataset_sha256: String,
    pub region_ids: Vec<String>,
}

/// SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

/// Recomputes `H` from the checkpoint in evaluation mode and writes the
/// headerless CSV (rows in `region_ids` order) and its metadata file into `dir`.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    dataset: &RegionDataset,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<Tensor, CheckpointError> {
    let fingerprint = dataset.fingerprint();
    ckpt.verify(&fingerprint)?;
    let model = ckpt.to_model()?;
    let h = model.embed(&PreparedData::new(dataset)?)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| CheckpointError::Io { path: dir.to_path_buf(), source })?;
    write_csv_rows(&dir.join(EMBEDDINGS_FILE), h.data().chunks(h.cols()))?;
    let meta = EmbeddingMeta {
        n: h.rows(),
        d: h.cols(),
        seed,
        epoch: ckpt.epoch,
        config_hash: config_hash(&ckpt.model_config),
        dataset_sha256: fingerprint.sha256,
        region_ids: dataset.region_ids.clone(),
    };
    let path = dir.join(EMBEDDINGS_META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| CheckpointError::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|source| CheckpointError::Io { path, source })?;
    Ok(h)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    read_real_matrix(path)
}
