//! Versioned checkpoint and calibration artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::networks::{ModelBlueprint, OsdnModel};
use crate::openmax::OpenMaxModel;

pub const CHECKPOINT_VERSION: u32 = 1;

/// All five parameter sets plus the structural blueprint, toggles, config
/// hash and the epoch the checkpoint was selected at.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub blueprint: ModelBlueprint,
    pub params: ParamStore,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_model(
        model: &OsdnModel,
        epoch: usize,
        val_accuracy: f64,
        config_hash: String,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            blueprint: model.blueprint(),
            params: model.store.clone(),
            epoch,
            val_accuracy,
            config_hash,
        }
    }

    /// Rebuild the model: structure from the blueprint, weights from the
    /// stored parameters.
    pub fn to_model(&self) -> Result<OsdnModel> {
        let mut model = self.blueprint.build(0)?;
        let expected: Vec<&String> = model.store.names().collect();
        let saved: Vec<&String> = self.params.names().collect();
        if expected != saved {
            return Err(Error::Serde(format!(
                "checkpoint parameter inventory mismatch: {} stored vs {} expected",
                saved.len(),
                expected.len()
            )));
        }
        model.store = self.params.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Stable digest of the serialized checkpoint, for report metadata.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("checkpoint serializes"));
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()[..16]
            .to_string()
    }
}

/// OpenMax calibration serialized alongside its checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub version: u32,
    pub openmax: OpenMaxModel,
    pub config_hash: String,
}

impl CalibrationArtifact {
    pub fn new(openmax: OpenMaxModel, config_hash: String) -> Self {
        CalibrationArtifact { version: CHECKPOINT_VERSION, openmax, config_hash }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CalibrationArtifact> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Data(format!("cannot read calibration {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::networks::Toggles;

    #[test]
    fn checkpoint_round_trip_preserves_weights_and_outputs() {
        let mut cfg = RunConfig::default();
        cfg.model.profile = "micro".to_string();
        cfg.dadl.spatial_kernel = 3;
        let mut bp = ModelBlueprint::from_config(&cfg, 2, 8).unwrap();
        bp.toggles = Toggles { dec: true, dadl: true, ssd: true, caml: true };
        let model = bp.build(3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::from_model(&model, 4, 87.5, "hash".to_string());
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 4);
        assert_eq!(loaded.val_accuracy, 87.5);
        let rebuilt = loaded.to_model().unwrap();

        let x = ndarray::Array4::from_elem((2, 3, 8, 8), 0.4);
        let (a, _) = model.infer(&x).unwrap();
        let (b, _) = rebuilt.infer(&x).unwrap();
        assert_eq!(a, b, "reloaded model must be bit-identical");
        assert_eq!(ck.hash(), loaded.hash());
    }

    #[test]
    fn calibration_round_trip() {
        let art = CalibrationArtifact::new(
            OpenMaxModel {
                class_means: vec![vec![0.1, 0.2]],
                weibull: vec![(2.0, 1.0)],
                sigma: 3,
                tail_size: 5,
                threshold: 0.95,
                feature_space: crate::openmax::FeatureSpace::Latent,
            },
            "h".to_string(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        art.save(&path).unwrap();
        let loaded = CalibrationArtifact::load(&path).unwrap();
        assert_eq!(loaded.openmax.class_means, art.openmax.class_means);
        assert_eq!(loaded.openmax.weibull, art.openmax.weibull);
    }
}

