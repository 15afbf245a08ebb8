//! Single-file JSON checkpoints: config echo, parameters, batch-norm running
//! statistics and optional optimizer state, tagged with a format version.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::OptimizerState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Pipeline stage that produced this checkpoint (e.g. `source`, `pre_adapt`, `final`).
    pub stage: String,
    pub model_config: ModelConfig,
    pub params: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, stage: &str, optimizer: Option<&OptimizerState>) -> Self {
        let (mean, var) = model.bn_running_stats();
        Self {
            format_version: FORMAT_VERSION,
            stage: stage.to_string(),
            model_config: model.config().clone(),
            params: model.params().to_vec(),
            bn_running_mean: mean.to_vec(),
            bn_running_var: var.to_vec(),
            optimizer: optimizer.cloned(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_parts(
            self.model_config.clone(),
            self.params.clone(),
            self.bn_running_mean.clone(),
            self.bn_running_var.clone(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "{}: checkpoint format version {v} is not supported (expected {FORMAT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(Error::Format(format!("{}: missing format_version", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        Model::new(ModelConfig { embed_dim: 6, num_classes: 3, ..ModelConfig::default() }, 1).unwrap()
    }

    #[test]
    fn save_and_load_restores_bit_identical_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = small();
        let state = OptimizerState { velocity: vec![0.125; model.params().len()], steps: 3 };
        Checkpoint::from_model(&model, "source", Some(&state)).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.to_model().unwrap(), model);
        assert_eq!(ck.optimizer.unwrap(), state);
    }

    #[test]
    fn mismatched_version_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut ck = Checkpoint::from_model(&small(), "source", None);
        ck.format_version = FORMAT_VERSION + 1;
        ck.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
    }

    #[test]
    fn parameter_count_mismatch_is_rejected() {
        let mut ck = Checkpoint::from_model(&small(), "source", None);
        ck.params.pop();
        assert!(matches!(ck.to_model(), Err(Error::Format(_))));
    }
}
