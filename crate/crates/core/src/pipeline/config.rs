use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consolidation::SelectionConfig;
use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::preadapt::PreAdaptConfig;
use crate::selector;
use crate::ssl::SSLConfig;

/// Where the source/target pair comes from. Manifests win over the generator
/// when both are given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Start from this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            epochs: 20,
            batch_size: 64,
            augment: true,
            optimizer: OptimizerConfig { lr_backbone: 0.01, lr_head: 0.01, momentum: 0.9, weight_decay: 5e-4 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `hcpr`, `near_centroid` or `confidence_threshold`.
    pub selector: String,
    /// SSL epochs at which selection is re-run and the split replaced.
    pub schedule: Vec<usize>,
    /// Repeat the pre-adaptation epochs once more after selection.
    pub pre_adapt_after_selection: bool,
    /// Run the selector after every pre-adaptation epoch and log
    /// quantity/quality (costs one selection pass per epoch).
    pub track_selection: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub source: SourceConfig,
    pub augment: AugmentConfig,
    pub pre_adapt: PreAdaptConfig,
    pub selection: SelectionConfig,
    pub ssl: SSLConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            selector: "hcpr".into(),
            schedule: Vec::new(),
            pre_adapt_after_selection: false,
            track_selection: false,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            source: SourceConfig::default(),
            augment: AugmentConfig::default(),
            pre_adapt: PreAdaptConfig::default(),
            selection: SelectionConfig::default(),
            ssl: SSLConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.pre_adapt.validate()?;
        self.selection.validate()?;
        self.ssl.validate()?;
        self.source.optimizer.validate("source.optimizer")?;
        if self.source.batch_size == 0 {
            return Err(Error::Config("source.batch_size must be >= 1".into()));
        }
        selector::lookup(&self.selector)?;
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("schedule must be strictly increasing, got {:?}", self.schedule)));
        }
        if let Some(&e) = self.schedule.iter().find(|&&e| e == 0 || e >= self.ssl.epochs) {
            return Err(Error::Config(format!(
                "schedule epoch {e} must lie strictly between 0 and ssl.epochs ({})",
                self.ssl.epochs
            )));
        }
        for (field, path) in [
            ("source.checkpoint", &self.source.checkpoint),
            ("data.source_manifest", &self.data.source_manifest),
            ("data.target_manifest", &self.data.target_manifest),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
                }
            }
        }
        if self.data.target_manifest.is_none() {
            let shape = self.data.synthetic.image_shape();
            let (h, w, c) = (self.model.input_shape[0], self.model.input_shape[1], self.model.input_shape[2]);
            if shape != [h, w, c] || self.data.synthetic.num_classes() != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.synthetic produces {} classes of shape {:?} but the model expects {} classes of shape {:?}",
                    self.data.synthetic.num_classes(),
                    shape,
                    self.model.num_classes,
                    self.model.input_shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parse a TOML config file (or start from defaults), apply `key.path=value`
/// overrides, and validate.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut table = toml::Table::try_from(PipelineConfig::default()).map_err(|e| Error::Format(e.to_string()))?;
    merge(&mut table, file);
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let config: PipelineConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Deep-merge `over` into `base`. A table whose `kind` tag changes is
/// replaced wholesale, since its fields belong to another variant.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    let leaf = parts[parts.len() - 1];
    if leaf == "kind" && cursor.get("kind") != Some(&value) {
        cursor.clear();
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config(None, &[]).unwrap();
        assert_eq!(cfg.pre_adapt.z, 3);
        assert_eq!(cfg.selection.k_tilde, 4);
        assert_eq!(cfg.selection.tau1_pct, 0.8);
        assert_eq!(cfg.selection.tau2_pct, 1.6);
        assert_eq!(cfg.ssl.confidence_tau, 0.95);
        assert_eq!(cfg.pre_adapt.batch_size, 64);
        assert_eq!(cfg.ssl.labeled_batch, 64);
        assert_eq!(cfg.model.embed_dim, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("[ssl]\nconfidence = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("confidence"));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = parse_config(None, &["pre_adapt.z=5".into(), "selector=near_centroid".into(), "output_dir=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.pre_adapt.z, 5);
        assert_eq!(cfg.selector, "near_centroid");
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert!(parse_config(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn threshold_order_error_names_both_fields() {
        let msg = parse_config(None, &["selection.tau1_pct=2.0".into(), "selection.tau2_pct=1.0".into()])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("tau1_pct") && msg.contains("tau2_pct"), "{msg}");
    }

    #[test]
    fn schedule_must_increase() {
        assert!(parse_config(None, &["schedule=[3, 2]".into()]).is_err());
        assert!(parse_config(None, &["schedule=[2, 5]".into()]).is_ok());
    }

    #[test]
    fn partial_tables_keep_their_defaults() {
        let cfg = parse_config(None, &["data.synthetic.target_style.stroke=0.2".into()]).unwrap();
        let crate::data::SyntheticSpec::Digits(d) = &cfg.data.synthetic else { panic!("digits expected") };
        let default = crate::data::synthetic::DigitSpec::default();
        assert_eq!(d.target_style.stroke, 0.2);
        assert_eq!(d.target_style.background, default.target_style.background);
        let cfg = parse_config(
            None,
            &[
                "data.synthetic.kind=blobs".into(),
                "model.input_shape=[1, 1, 8]".into(),
                "model.num_classes=3".into(),
                "model.conv_stages=[{channels = 4, kernel = 1, pool = false}]".into(),
            ],
        )
        .unwrap();
        assert!(matches!(cfg.data.synthetic, crate::data::SyntheticSpec::Blobs(_)));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = parse_config(None, &["seed=9".into(), "schedule=[4]".into()]).unwrap();
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
