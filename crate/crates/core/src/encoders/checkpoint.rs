//! JSON checkpoints: model config plus named tensors with shape headers.
//! Floats are written in shortest round-trip form, so reloads are bit-exact.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncoderParams, Model, ModelConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect();
        Self { format_version: FORMAT_VERSION, config: model.config, tensors }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", self.format_version)));
        }
        let mut params = EncoderParams::zeros(&self.config);
        let slots = params.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                self.tensors.len()
            )));
        }
        for ((name, slot), stored) in slots.into_iter().zip(self.tensors) {
            if stored.name != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", stored.name)));
            }
            if stored.shape != [slot.nrows(), slot.ncols()] || stored.data.len() != slot.len() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", stored.shape)));
            }
            *slot = Array2::from_shape_vec((stored.shape[0], stored.shape[1]), stored.data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(Model { config: self.config, params })
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&ModelCheckpoint::from_model(model))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<ModelCheckpoint>(&text)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Architecture;

    #[test]
    fn reload_is_bit_exact() {
        for arch in [Architecture::Recurrent, Architecture::Attention] {
            let model = Model::new(ModelConfig::new(arch, 9, 8, 7), 3);
            let json = serde_json::to_string(&ModelCheckpoint::from_model(&model)).unwrap();
            let back = serde_json::from_str::<ModelCheckpoint>(&json).unwrap().into_model().unwrap();
            assert_eq!(model, back);
        }
    }

    #[test]
    fn default_dim_survives_round_trip() {
        let model = Model::new(ModelConfig::new(Architecture::Attention, 3, super::super::DEFAULT_DIM, 4), 0);
        let back = ModelCheckpoint::from_model(&model).into_model().unwrap();
        assert_eq!(back.config.dim, 64);
    }

    #[test]
    fn rejects_mismatched_tensor() {
        let model = Model::new(ModelConfig::new(Architecture::Recurrent, 3, 4, 4), 0);
        let mut ck = ModelCheckpoint::from_model(&model);
        ck.tensors[0].shape = [2, 4];
        ck.tensors[0].data.truncate(8);
        assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));
    }
}
