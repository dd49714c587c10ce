use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::KaeConfig;
use super::params::ModelParams;
use crate::autodiff::Tensor;
use crate::data::io_write_file;
use crate::error::{Error, Result};
use crate::training::TrainingState;

pub const CHECKPOINT_FORMAT: &str = "kae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: KaeConfig,
    params: Vec<NamedArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingState>,
}

/// Model weights plus, for resumable checkpoints, optimizer and loop state.
///
/// Stored as JSON; floats use shortest round-trip formatting, so a
/// save/load cycle is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, training: Option<TrainingState>) -> Self {
        Self { params, training }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.params.config().clone(),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            training: self.training.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "not a checkpoint (format '{}')",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let named = file
            .params
            .into_iter()
            .map(|a| Ok((a.name, Tensor::new(a.shape, a.data)?)))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_named(&file.config, named)?;
        if let Some(state) = &file.training {
            state.validate_against(&params)?;
        }
        Ok(Self {
            params,
            training: file.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io_write_file(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
