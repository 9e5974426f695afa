//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `C2FARCK1`, a little-endian `u32` manifest
//! length, the UTF-8 JSON manifest, then every tensor listed in the
//! manifest as little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Learned, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::neural::ParamSet;

pub const MAGIC: &[u8; 8] = b"C2FARCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: ModelConfig,
    pub checkpoint_index: usize,
    pub windows_seen: usize,
    pub validation_history: Vec<(usize, f64)>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn new(model: &Learned, checkpoint_index: usize, windows_seen: usize, validation_history: Vec<(usize, f64)>) -> Self {
        let config = model.config();
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            model_kind: config.kind(),
            config,
            checkpoint_index,
            windows_seen,
            validation_history,
            tensors: model
                .tensors()
                .into_iter()
                .map(|(name, a)| TensorEntry {
                    name,
                    shape: a.shape().to_vec(),
                })
                .collect(),
        }
    }
}

/// Writes `model` with `manifest`; the tensor list is regenerated from the model.
pub fn save_checkpoint(path: &Path, model: &Learned, manifest: &CheckpointManifest) -> Result<()> {
    let mut m = manifest.clone();
    m.tensors = CheckpointManifest::new(model, 0, 0, Vec::new()).tensors;
    let json = serde_json::to_vec(&m)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for (_, a) in model.tensors() {
        for &v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Learned, CheckpointManifest)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let mut model = Learned::init(&manifest.config, &mut ChaCha8Rng::seed_from_u64(0));
    {
        let mut tensors = model.tensors_mut();
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint("tensor count does not match the configuration".into()));
        }
        for ((name, view), entry) in tensors.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || view.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {} does not match {name}", entry.name)));
            }
            let mut buf = [0u8; 4];
            for v in view.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated data in tensor {name}")))?;
                *v = f32::from_le_bytes(buf);
            }
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianConfig;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = ModelConfig::Gaussian(GaussianConfig::new(5, 0.1, 2).unwrap());
        let m = Learned::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let man = CheckpointManifest::new(&m, 3, 96, vec![(2, 0.5)]);
        save_checkpoint(&p, &m, &man).unwrap();
        let (back, man2) = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(man2, man);
        assert_eq!(man2.model_kind, ModelKind::DeeparGaussian);

        let bytes = std::fs::read(&p).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
