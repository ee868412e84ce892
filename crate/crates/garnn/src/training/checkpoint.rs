//! Versioned checkpoint container: config, normalization statistics, named
//! parameter tensors, optimizer state, and the validation history.
//!
//! Serialized as JSON with shortest-round-trip floats, so save → load →
//! save is byte-identical. Writes go to a temp file first and rename into
//! place.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::training::adam::OptimizerState;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// One line of training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub norm: NormStats,
    pub sensor_ids: Vec<String>,
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn snapshot(
        config: &TrainConfig,
        norm: NormStats,
        sensor_ids: &[String],
        epoch: usize,
        params: &ParamSet,
        optimizer: &OptimizerState,
        history: &[EpochRecord],
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            norm,
            sensor_ids: sensor_ids.to_vec(),
            epoch,
            params: params
                .iter()
                .map(|(_, name, value)| NamedTensor {
                    name: name.to_string(),
                    shape: value.shape().to_vec(),
                    values: value.data().to_vec(),
                })
                .collect(),
            optimizer: optimizer.clone(),
            history: history.to_vec(),
        }
    }

    /// Copy stored values into a freshly built parameter set, matched by
    /// name with shape verification.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model wants {}",
                self.params.len(),
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let stored = self
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            if stored.shape != params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?} in the checkpoint, {:?} in the model",
                    stored.shape,
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = Tensor::new(stored.shape.clone(), stored.values.clone());
        }
        Ok(())
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        ));
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: parse failed: {e}", path.display())))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (this build reads {})",
                ckpt.format_version, FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::build_model;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = TrainConfig {
            units: 3,
            embed: 2,
            heads: 1,
            layers: 1,
            diffusion_steps: 1,
            ..TrainConfig::default()
        };
        let (params, _model) = build_model(&cfg, 7);
        let opt = OptimizerState::new(&params);
        Checkpoint::snapshot(
            &cfg,
            NormStats {
                mean: 50.0,
                std: 9.5,
            },
            &["a".to_string(), "b".to_string()],
            3,
            &params,
            &opt,
            &[EpochRecord {
                epoch: 0,
                lr: 0.01,
                train_loss: 0.5,
                val_mae: 4.0,
                val_rmse: 6.0,
                val_mape: 10.0,
            }],
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn restore_round_trips_parameter_values() {
        let ckpt = sample_checkpoint();
        let (mut params, _model) = build_model(&ckpt.config, 12345); // different init
        ckpt.restore_params(&mut params).unwrap();
        for (idx, (_, name, value)) in params.iter().enumerate() {
            let stored = &ckpt.params[idx];
            assert_eq!(stored.name, name);
            assert_eq!(stored.values, value.data());
        }
    }

    #[test]
    fn wrong_version_is_rejected_with_both_versions_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.format_version = 99;
        let json = serde_json::to_string(&ckpt).unwrap();
        fs::write(&path, json).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains('1'), "{msg}");
    }

    #[test]
    fn restore_rejects_mismatched_model() {
        let ckpt = sample_checkpoint();
        let other_cfg = TrainConfig {
            units: 5, // different width
            embed: 2,
            heads: 1,
            layers: 1,
            diffusion_steps: 1,
            ..TrainConfig::default()
        };
        let (mut params, _model) = build_model(&other_cfg, 7);
        assert!(ckpt.restore_params(&mut params).is_err());
    }
}
