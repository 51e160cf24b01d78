use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{MrtError, Result};
use crate::model::{ModelConfig, MrtNet};
use crate::nn::ParamStore;

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: Config,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub epoch: usize,
    pub best_metric: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| MrtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MrtError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MrtError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Builds the architecture described by `model` and loads the stored
    /// weights into it; any tensor that does not fit is reported.
    pub fn restore(&self, model: &ModelConfig) -> Result<(MrtNet, ParamStore)> {
        let (net, mut store) = MrtNet::new(model.clone(), 0)?;
        store.load_from(&self.params)?;
        Ok((net, store))
    }
}
