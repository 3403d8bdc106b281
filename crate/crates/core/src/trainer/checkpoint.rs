use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{init_params, ModelError, ModelParams};
use crate::numcore::{DenseMatrix, Rng};

use super::{TrainConfig, TrainError};

pub const CHECKPOINT_FORMAT: &str = "canet-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Config plus every parameter matrix, as JSON. Floats are written in
/// shortest round-trip form, so reloading is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: Vec<NamedMatrix>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            input_dim: params.input_dim,
            num_classes: params.num_classes,
            params: params
                .named_values()
                .into_iter()
                .map(|(name, m)| NamedMatrix {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                    values: m.into_values(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored values into it.
    pub fn to_params(&self) -> Result<ModelParams, ModelError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Incompatible(format!("unknown checkpoint format {:?}", self.format)));
        }
        let mut params = init_params(&self.config.model, self.input_dim, self.num_classes, &Rng::new(self.config.seed))?;
        let named = self
            .params
            .iter()
            .map(|p| {
                DenseMatrix::from_vec(p.rows, p.cols, p.values.clone())
                    .map(|m| (p.name.clone(), m))
                    .map_err(|e| ModelError::Incompatible(format!("{}: {e}", p.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        params.load_values(&named)?;
        Ok(params)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut text = serde_json::to_string(ckpt).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })
}
