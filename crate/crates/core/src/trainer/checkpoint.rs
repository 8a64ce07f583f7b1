//! Checkpoint format: a JSON manifest plus a sidecar of little-endian `f64`s.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Fingerprint;
use crate::error::CheckpointError;
use crate::model::{ModelConfig, RegionModel};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: &str = "1";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SIDECAR_FILE: &str = "checkpoint.bin";
const DTYPE: &str = "f64-le";

/// Everything needed to rebuild a trained model and its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub fingerprint: Fingerprint,
    pub epoch: usize,
    pub parameters: Vec<(String, Tensor)>,
    pub embeddings: Option<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    dtype: String,
    sidecar: String,
    sidecar_sha256: String,
    model_config: ModelConfig,
    fingerprint: Fingerprint,
    epoch: usize,
    tensors: Vec<Entry>,
    embeddings: Option<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the sidecar, in elements.
    offset: usize,
}

impl Checkpoint {
    pub fn from_model(model: &RegionModel, fingerprint: Fingerprint, epoch: usize, embeddings: Option<Tensor>) -> Self {
        Self {
            model_config: model.config.clone(),
            fingerprint,
            epoch,
            parameters: model.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            embeddings,
        }
    }

    pub fn verify(&self, fingerprint: &Fingerprint) -> Result<(), CheckpointError> {
        if &self.fingerprint != fingerprint {
            return Err(CheckpointError::Fingerprint {
                expected: describe(&self.fingerprint),
                found: describe(fingerprint),
            });
        }
        Ok(())
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn to_model(&self) -> Result<RegionModel, CheckpointError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model =
            RegionModel::new(self.model_config.clone(), self.fingerprint.n, self.fingerprint.views.clone(), &mut rng)?;
        if model.store.len() != self.parameters.len() {
            return Err(CheckpointError::Format(format!(
                "model has {} parameters, checkpoint has {}",
                model.store.len(),
                self.parameters.len()
            )));
        }
        for (name, value) in &self.parameters {
            if model.store.id(name).is_none() {
                return Err(CheckpointError::Format(format!("unknown parameter `{name}`")));
            }
            model.store.set_value(name, value.clone())?;
        }
        Ok(model)
    }
}

fn describe(f: &Fingerprint) -> String {
    let views: Vec<String> = f.views.iter().map(|v| format!("{}:{}", v.name, v.features)).collect();
    format!("n={} views=[{}] sha256={}", f.n, views.join(","), &f.sha256[..f.sha256.len().min(12)])
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Writes both files into `dir`; each is written to a temporary name first.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<PathBuf, CheckpointError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::new();
    let mut offset = 0;
    let mut entry = |name: &str, t: &Tensor, bytes: &mut Vec<u8>| {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let e = Entry { name: name.to_string(), shape: t.shape().to_vec(), offset };
        offset += t.len();
        e
    };
    let tensors: Vec<Entry> = ckpt.parameters.iter().map(|(n, t)| entry(n, t, &mut bytes)).collect();
    let embeddings = ckpt.embeddings.as_ref().map(|t| entry("embeddings", t, &mut bytes));
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION.into(),
        dtype: DTYPE.into(),
        sidecar: SIDECAR_FILE.into(),
        sidecar_sha256: hex::encode(Sha256::digest(&bytes)),
        model_config: ckpt.model_config.clone(),
        fingerprint: ckpt.fingerprint.clone(),
        epoch: ckpt.epoch,
        tensors,
        embeddings,
    };
    write_atomic(&dir.join(SIDECAR_FILE), &bytes)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let path = dir.join(CHECKPOINT_FILE);
    write_atomic(&path, (text + "\n").as_bytes())?;
    Ok(path)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Accepts the checkpoint directory or the manifest path.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported format version {:?}", m.format_version)));
    }
    if m.dtype != DTYPE {
        return Err(CheckpointError::Format(format!("unsupported dtype {:?}", m.dtype)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let sidecar = dir.join(&m.sidecar);
    let bytes = fs::read(&sidecar).map_err(io_err(&sidecar))?;
    if hex::encode(Sha256::digest(&bytes)) != m.sidecar_sha256 {
        return Err(CheckpointError::Format(format!("{}: checksum mismatch", sidecar.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Format("sidecar length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let read = |e: &Entry| -> Result<Tensor, CheckpointError> {
        let len: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| CheckpointError::Format(format!("`{}` runs past the sidecar", e.name)))?;
        Tensor::new(&e.shape, slice.to_vec()).map_err(|err| CheckpointError::Format(format!("`{}`: {err}", e.name)))
    };
    let parameters = m.tensors.iter().map(|e| Ok((e.name.clone(), read(e)?))).collect::<Result<Vec<_>, CheckpointError>>()?;
    let embeddings = m.embeddings.as_ref().map(read).transpose()?;
    Ok(Checkpoint { model_config: m.model_config, fingerprint: m.fingerprint, epoch: m.epoch, parameters, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::PreparedData;

    fn trained() -> (RegionModel, crate::data::RegionDataset) {
        let ds = generate_synthetic(&SynthConfig { n: 10, ..SynthConfig::default() }).unwrap().dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = RegionModel::new(ModelConfig::tiny(), 10, ds.schema(), &mut rng).unwrap();
        (model, ds)
    }

    #[test]
    fn round_trip_reproduces_forward_exactly() {
        let (model, ds) = trained();
        let data = PreparedData::new(&ds).unwrap();
        let h = model.embed(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Checkpoint::from_model(&model, ds.fingerprint(), 3, Some(h.clone())), dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.embeddings.as_ref(), Some(&h));
        back.verify(&ds.fingerprint()).unwrap();
        let reloaded = back.to_model().unwrap();
        assert_eq!(reloaded.embed(&data).unwrap(), h);
    }

    #[test]
    fn other_dataset_fails_fingerprint() {
        let (model, ds) = trained();
        let other = generate_synthetic(&SynthConfig { n: 10, seed: 99, ..SynthConfig::default() }).unwrap().dataset;
        let ckpt = Checkpoint::from_model(&model, ds.fingerprint(), 1, None);
        assert!(matches!(ckpt.verify(&other.fingerprint()), Err(CheckpointError::Fingerprint { .. })));
    }

    #[test]
    fn corrupted_sidecar_detected() {
        let (model, ds) = trained();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Checkpoint::from_model(&model, ds.fingerprint(), 1, None), dir.path()).unwrap();
        let side = dir.path().join(SIDECAR_FILE);
        let mut bytes = fs::read(&side).unwrap();
        bytes[0] ^= 1;
        fs::write(&side, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Format(_))));
    }
}
