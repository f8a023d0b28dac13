//! Pipeline configuration: a TOML file mirrored by serde defaults, echoed
//! verbatim into dataset manifests so every version records the settings
//! that produced it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thoughtforge_core::corpus::FilterPolicy;
use thoughtforge_core::refine::{PairMode, SelectionPolicy};
use thoughtforge_core::SimulatorConfig;

/// Which backend implementation the pipeline talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Simulated,
    Http,
}

/// Backend connection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Model name sent to HTTP backends and recorded in provenance.
    pub model: String,
    /// Base URL of an OpenAI-style server, e.g. `http://localhost:8000`.
    pub base_url: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt for retryable failures.
    pub max_retries: u32,
    /// Maximum in-flight HTTP requests.
    pub concurrency: usize,
    pub simulator: SimulatorConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulated,
            model: "local-model".to_owned(),
            base_url: "http://localhost:8000".to_owned(),
            timeout_secs: 600,
            max_retries: 3,
            concurrency: 4,
            simulator: SimulatorConfig::default(),
        }
    }
}

/// Exploration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Rollout budget per problem.
    pub rollouts_per_problem: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Stop rolling a problem out once one attempt verifies.
    pub stop_on_first_correct: bool,
    /// Worker threads for exploring problems concurrently.
    pub threads: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            rollouts_per_problem: 8,
            temperature: thoughtforge_core::backend::DEFAULT_ROLLOUT_TEMPERATURE,
            max_tokens: thoughtforge_core::backend::DEFAULT_MAX_TOKENS,
            stop_on_first_correct: true,
            threads: 4,
        }
    }
}

/// Hyperparameters recorded in every dataset manifest. Each version is
/// trained from the same base model, so retraining never compounds drift
/// from earlier rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub base_model: String,
    pub learning_rate: f64,
    pub batch_size: u32,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            base_model: "Qwen2.5-32B-Instruct".to_owned(),
            learning_rate: 1e-5,
            batch_size: 96,
        }
    }
}

/// Mixture targets for assembling the seed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub total: usize,
    pub allow_shortfall: bool,
    /// Bucket name (`domain/difficulty`) to weight.
    pub weights: std::collections::BTreeMap<String, f64>,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            total: 0,
            allow_shortfall: false,
            weights: std::collections::BTreeMap::new(),
        }
    }
}

/// Preference-pair settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub mode: PairMode,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            mode: PairMode::Full,
        }
    }
}

/// Top-level pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seed for every derived random stream in the run.
    pub run_seed: u64,
    /// Pool directory; the `--pool` flag overrides it.
    pub pool: Option<String>,
    /// Directory where `iterate` writes emitted training files.
    pub out_dir: Option<String>,
    /// Most rounds `iterate` will run; exhaustion may stop it earlier,
    /// and a cap of 0 runs nothing.
    pub max_iterations: u32,
    pub backend: BackendConfig,
    pub filter: FilterPolicy,
    pub mix: MixConfig,
    pub explore: ExploreConfig,
    pub select: SelectionPolicy,
    pub dpo: DpoConfig,
    pub training: TrainingMeta,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            run_seed: 0,
            pool: None,
            out_dir: None,
            max_iterations: 8,
            backend: BackendConfig::default(),
            filter: FilterPolicy::default(),
            mix: MixConfig::default(),
            explore: ExploreConfig::default(),
            select: SelectionPolicy::default(),
            dpo: DpoConfig::default(),
            training: TrainingMeta::default(),
        }
    }
}

/// Failures loading a configuration file.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Invalid {
        path: String,
        source: toml::de::Error,
    },
}

impl PipelineConfig {
    /// Loads a TOML config file; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&raw).map_err(|source| ConfigError::Invalid {
            path: path.display().to_string(),
            source,
        })
    }

    /// The settings echo stored in dataset manifests.
    pub fn as_settings(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_a_full_roundtrip() {
        let config = PipelineConfig::default();
        assert_eq!(config.backend.kind, BackendKind::Simulated);
        assert_eq!(config.explore.rollouts_per_problem, 8);
        assert_eq!(config.max_iterations, 8);
        assert_eq!(config.training.batch_size, 96);
        let toml_text = toml::to_string(&config).unwrap();
        let back: PipelineConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn partial_toml_fills_in_defaults() {
        let parsed: PipelineConfig = toml::from_str(
            r#"
            run_seed = 7

            [backend]
            kind = "http"
            base_url = "http://example.test:9000"

            [explore]
            rollouts_per_problem = 20

            [mix.weights]
            "math/hard" = 0.25
            "math/normal" = 0.75
            "#,
        )
        .unwrap();
        assert_eq!(parsed.run_seed, 7);
        assert_eq!(parsed.backend.kind, BackendKind::Http);
        assert_eq!(parsed.backend.timeout_secs, 600);
        assert_eq!(parsed.explore.rollouts_per_problem, 20);
        assert_eq!(parsed.explore.temperature, 0.7);
        assert_eq!(parsed.mix.weights.len(), 2);
        assert_eq!(parsed.training.learning_rate, 1e-5);
    }

    #[test]
    fn settings_echo_is_structured_json() {
        let config = PipelineConfig::default();
        let echo = config.as_settings();
        assert_eq!(echo["training"]["batch_size"], 96);
        assert_eq!(echo["backend"]["kind"], "simulated");
    }
}
