//! JSON run configuration with strict parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::miniedge::BackboneConfig;
use crate::partition::AdaptConfig;
use crate::trainer::{PretrainConfig, Seeds, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub channels: [usize; 3],
    pub depths: [usize; 3],
    pub embed_dim: usize,
    pub input_size: usize,
    pub attention_stages: Vec<usize>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            channels: b.stage_channels,
            depths: b.stage_depths,
            embed_dim: b.embed_dim,
            input_size: b.input_size,
            attention_stages: b.attention_stages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Identities split into adaptation-train and evaluation folds.
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub dataset_seed: u64,
    pub positive_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_ids: 100,
            samples_per_id: 10,
            dataset_seed: 42,
            positive_fraction: 0.5,
        }
    }
}

/// Source pretraining on a separate identity range `n_ids..n_ids + pretrain.n_ids`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub n_ids: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            n_ids: 200,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adapt_layers: String,
    pub seeds: Seeds,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.weights.lambda,
            margin: t.weights.margin,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adapt_layers: t.adapt.to_string(),
            seeds: t.seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub far_targets: Vec<f64>,
    pub n_folds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            far_targets: crate::metrics::FAR_TARGETS.to_vec(),
            n_folds: 2,
        }
    }
}

/// Whole-pipeline configuration. Every section and key is optional and
/// defaults as in `hfr --print-defaults`; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Loads `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone()?;
        self.train_config()?;
        if self.data.samples_per_id < 2 {
            return Err(Error::InvalidConfig("data.samples_per_id must be >= 2".into()));
        }
        if self.pretrain.n_ids < 2 {
            return Err(Error::InvalidConfig("pretrain.n_ids must be >= 2".into()));
        }
        if self.train.batch_size < 2 || self.pretrain.batch_size < 2 {
            return Err(Error::InvalidConfig("batch sizes must be >= 2".into()));
        }
        if self.eval.far_targets.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::InvalidConfig("eval.far_targets must lie in (0, 1)".into()));
        }
        if self.eval.n_folds == 0 || self.data.n_ids < 2 * self.eval.n_folds {
            return Err(Error::InvalidConfig(format!(
                "data.n_ids = {} cannot form eval.n_folds = {}",
                self.data.n_ids, self.eval.n_folds
            )));
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let b = &self.backbone;
        let cfg = BackboneConfig {
            input_size: b.input_size,
            stage_channels: b.channels,
            stage_depths: b.depths,
            attention_stages: b.attention_stages.clone(),
            embed_dim: b.embed_dim,
            ..BackboneConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adapt_layers(&self) -> Result<AdaptConfig> {
        self.train.adapt_layers.parse()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("train.lr must be > 0, got {}", t.lr)));
        }
        Ok(TrainConfig {
            weights: LossWeights::new(t.lambda, t.margin)?,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adapt: self.adapt_layers()?,
            seeds: t.seeds,
            positive_fraction: self.data.positive_fraction,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            margin: self.train.margin,
            positive_fraction: self.data.positive_fraction,
            seeds: self.train.seeds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.train.adapt_layers, "LN,ST");
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [r#"{"trian": {}}"#, r#"{"train": {"lamda": 0.5}}"#, r#"{"train": {"seeds": {"x": 1}}}"#] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::InvalidConfig(_))), "{bad}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"lambda": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"adapt_layers": "LN,XX"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"backbone": {"embed_dim": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"n_ids": 3}, "eval": {"n_folds": 2}}"#).is_err());
        assert!(RunConfig::from_json("{not json").is_err());
    }
}
