//! Experiment configuration: one TOML document, overridable per key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use p2d_core::model::{Mode, ModelConfig};
use p2d_core::scene::SceneConfig;

use crate::error::{Result, RunError};
use crate::metrics::DEFAULT_THRESHOLDS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_p: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed of the parameter initialization and the batch order.
    pub seed: u64,
    pub stop_gradient_prediction: bool,
    /// Global gradient-norm limit; zero disables clipping.
    pub grad_clip: f64,
    /// Fraction of the steps over which the learning rate warms up linearly.
    pub warmup_fraction: f64,
    pub train_episodes: usize,
    /// Seed from which the training episodes are derived.
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.5,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            stop_gradient_prediction: false,
            grad_clip: 10.0,
            warmup_fraction: 0.0,
            train_episodes: 2000,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub moving_speed_cutoff: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub eval_episodes: usize,
    /// Seed from which the evaluation episodes are derived.
    pub data_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            moving_speed_cutoff: 1.0,
            score_threshold: p2d_core::detection::DEFAULT_SCORE_THRESHOLD,
            max_detections: p2d_core::detection::DEFAULT_MAX_DETECTIONS,
            eval_episodes: 500,
            data_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            mode: Mode::P2d,
            model: ModelConfig::for_scene(&scene),
            scene,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut doc: toml::Table = if text.trim().is_empty() {
            toml::Table::try_from(Self::default()).map_err(|e| RunError::Config(e.to_string()))?
        } else {
            text.parse()?
        };
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let config: Self = doc.try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate(self.mode)?;
        if self.model.grid != self.scene.grid {
            return Err(RunError::Config("model.grid must equal scene.grid".into()));
        }
        if self.model.num_classes != self.scene.num_classes {
            return Err(RunError::Config("model.num_classes must equal scene.num_classes".into()));
        }
        if self.model.n_prev > self.scene.n_prev {
            return Err(RunError::Config(format!(
                "model.n_prev = {} exceeds the {} previous frames the scenes provide",
                self.model.n_prev, self.scene.n_prev
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.learning_rate > 0.0) || t.lambda_p < 0.0 || !t.lambda_p.is_finite() {
            return Err(RunError::Config("training needs batch_size > 0, learning_rate > 0, lambda_p >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return Err(RunError::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        let e = &self.eval;
        if e.thresholds.is_empty() || e.thresholds.iter().any(|&d| !(d > 0.0)) {
            return Err(RunError::Config("eval thresholds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.score_threshold) || e.max_detections == 0 {
            return Err(RunError::Config("score_threshold must lie in [0, 1] and max_detections >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// value when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{item}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| RunError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
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
    fn defaults_round_trip_and_validate() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let text = config.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), config);
        assert_eq!(config.train.lambda_p, 0.5);
        assert_eq!(config.train.learning_rate, 2e-4);
        assert_eq!(config.model.k, 128);
    }

    #[test]
    fn overrides_replace_keys() {
        let config = ExperimentConfig::load_with_overrides(
            None,
            &[
                "mode=baseline_concat".into(),
                "train.lambda_p=0.1".into(),
                "model.n_prev=0".into(),
                "eval.thresholds=[1.0, 2.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.mode, Mode::BaselineConcat);
        assert_eq!(config.train.lambda_p, 0.1);
        assert_eq!(config.model.n_prev, 0);
        assert_eq!(config.eval.thresholds, vec![1.0, 2.0]);
        assert_ne!(config.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(ExperimentConfig::load_with_overrides(None, &["model.n_prev=1".into()]).is_err());
        assert!(ExperimentConfig::load_with_overrides(None, &["model.num_classes=3".into()]).is_err());
        assert!(ExperimentConfig::load_with_overrides(None, &["train.unknown=3".into()]).is_err());
        assert!(ExperimentConfig::load_with_overrides(None, &["nonsense".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"p2d\"\n[scene]\nn_prev = 1\n").is_err());
    }
}
