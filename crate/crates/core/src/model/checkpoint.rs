use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaseModel, ModelConfig};
use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    frozen: bool,
}

impl BaseModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta { config: self.config.clone(), frozen: self.frozen };
        let named: Vec<(String, &_)> = self.names.iter().cloned().zip(self.params.iter()).collect();
        container::write(path, CHECKPOINT_KIND, &meta, &named)
    }

    /// Loads a checkpoint, verifying its checksum and parameter layout.
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = container::read::<CheckpointMeta>(path, CHECKPOINT_KIND)?;
        let mut model = BaseModel::new(manifest.meta.config, &mut Rng::new(0))?;
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        if tensors.len() != model.params.len() {
            return Err(bad(format!("{} tensors, layout expects {}", tensors.len(), model.params.len())));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(bad(format!("entry {i} is {name} {:?}, expected {} {:?}", t.shape(), model.names[i], model.params[i].shape())));
            }
            model.params[i] = t;
        }
        model.frozen = manifest.meta.frozen;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut c = ModelConfig::desk(20, 6);
        c.d_model = 16;
        let mut m = BaseModel::new(c, &mut Rng::new(8)).unwrap();
        m.freeze();
        m.save(&p).unwrap();
        let back = BaseModel::load(&p).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert!(back.is_frozen());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn same_seed_same_weights() {
        let c = ModelConfig::desk(20, 6);
        let a = BaseModel::new(c.clone(), &mut Rng::new(0)).unwrap();
        let b = BaseModel::new(c.clone(), &mut Rng::new(0)).unwrap();
        let other = BaseModel::new(c, &mut Rng::new(1)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), other.checksum());
    }
}
