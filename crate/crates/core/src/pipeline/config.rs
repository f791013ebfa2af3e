use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::adapters::ModelSpec;
use crate::perturb::SamplingStrategy;
use crate::significance::DEFAULT_MAX_ITR;
use crate::surrogate::SurrogateKind;
use crate::transport::NormOrder;

fn default_perturbations() -> usize {
    64
}

fn default_alpha() -> f64 {
    1.0
}

fn default_ridge() -> f64 {
    1e-8
}

fn default_max_itr() -> usize {
    DEFAULT_MAX_ITR
}

fn default_threshold() -> f64 {
    0.5
}

/// Every knob of one explanation run. Serialized field names are the
/// config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    pub model: ModelSpec,
    /// word2vec text file used for input and text-output distances.
    pub embeddings: PathBuf,
    /// Number of perturbations (ignored by exhaustive sampling).
    #[serde(rename = "J", default = "default_perturbations")]
    pub perturbations: usize,
    #[serde(default)]
    pub strategy: SamplingStrategy,
    #[serde(default)]
    pub seed: u64,
    /// Kernel width; the median of the positive input distances when unset.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub p: NormOrder,
    /// Significance level; 1 keeps every record.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub surrogate_kind: SurrogateKind,
    #[serde(default = "default_ridge")]
    pub ridge_lambda: f64,
    /// Bootstrap iterations per record.
    #[serde(default = "default_max_itr")]
    pub max_itr: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub topk: Option<usize>,
}

impl RunConfig {
    pub fn new(prompt: impl Into<String>, model: ModelSpec, embeddings: impl Into<PathBuf>) -> Self {
        Self {
            prompt: prompt.into(),
            model,
            embeddings: embeddings.into(),
            perturbations: default_perturbations(),
            strategy: SamplingStrategy::default(),
            seed: 0,
            sigma: None,
            p: NormOrder::default(),
            alpha: default_alpha(),
            surrogate_kind: SurrogateKind::default(),
            ridge_lambda: default_ridge(),
            max_itr: default_max_itr(),
            threshold: default_threshold(),
            topk: None,
        }
    }

    /// Reads a JSON config. A relative `embeddings` path is resolved against
    /// the config file's directory.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if config.embeddings.is_relative() {
            if let Some(dir) = path.parent() {
                config.embeddings = dir.join(&config.embeddings);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::Config(msg.to_string()));
        if self.prompt.trim().is_empty() {
            return bad("prompt is empty");
        }
        if self.perturbations == 0 {
            return bad("J must be at least 1");
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma must be positive");
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return bad("ridge_lambda must be nonnegative");
        }
        if self.max_itr == 0 {
            return bad("max_itr must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if self.topk == Some(0) {
            return bad("topk must be at least 1");
        }
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}
