//! Layered settings: command-line flags over a JSON config file over
//! `ARISE_*` environment variables over built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use arise_core::eval::DEFAULT_SEED;
use arise_core::gateway::BackendConfig;
use arise_core::orchestrator::{EscalationThresholds, PanelMode};
use arise_core::par::ExecPolicy;
use arise_core::retrieval::DEFAULT_TOP_K;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// Every tunable, each optional so that layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub backend: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub requests_per_minute: Option<u32>,
    pub max_retries: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub mode: Option<PanelMode>,
    pub rag: Option<bool>,
    pub rag_k: Option<usize>,
    pub index: Option<PathBuf>,
    pub seed: Option<u64>,
    pub policy: Option<ExecPolicy>,
    pub parallelism: Option<usize>,
    pub escalation_high: Option<f64>,
    pub escalation_medium: Option<f64>,
}

impl Layer {
    /// Fields of `self` win; gaps are filled from `lower`.
    pub fn over(self, lower: Layer) -> Layer {
        Layer {
            backend: self.backend.or(lower.backend),
            script: self.script.or(lower.script),
            model: self.model.or(lower.model),
            endpoint: self.endpoint.or(lower.endpoint),
            api_key_env: self.api_key_env.or(lower.api_key_env),
            temperature: self.temperature.or(lower.temperature),
            max_tokens: self.max_tokens.or(lower.max_tokens),
            requests_per_minute: self.requests_per_minute.or(lower.requests_per_minute),
            max_retries: self.max_retries.or(lower.max_retries),
            timeout_secs: self.timeout_secs.or(lower.timeout_secs),
            mode: self.mode.or(lower.mode),
            rag: self.rag.or(lower.rag),
            rag_k: self.rag_k.or(lower.rag_k),
            index: self.index.or(lower.index),
            seed: self.seed.or(lower.seed),
            policy: self.policy.or(lower.policy),
            parallelism: self.parallelism.or(lower.parallelism),
            escalation_high: self.escalation_high.or(lower.escalation_high),
            escalation_medium: self.escalation_medium.or(lower.escalation_medium),
        }
    }

    pub fn from_file(path: &Path) -> Result<Layer, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Reads `ARISE_<FIELD>` variables through `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Layer, String> {
        fn parse<T: std::str::FromStr>(
            lookup: &impl Fn(&str) -> Option<String>,
            name: &str,
        ) -> Result<Option<T>, String> {
            match lookup(name) {
                None => Ok(None),
                Some(v) => v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| format!("{name}: cannot parse {v:?}")),
            }
        }
        fn json<T: for<'de> Deserialize<'de>>(
            lookup: &impl Fn(&str) -> Option<String>,
            name: &str,
        ) -> Result<Option<T>, String> {
            match lookup(name) {
                None => Ok(None),
                Some(v) => serde_json::from_value(serde_json::Value::String(v.trim().to_lowercase()))
                    .map(Some)
                    .map_err(|_| format!("{name}: unsupported value {v:?}")),
            }
        }
        Ok(Layer {
            backend: json(&lookup, "ARISE_BACKEND")?,
            script: lookup("ARISE_SCRIPT").map(PathBuf::from),
            model: lookup("ARISE_MODEL"),
            endpoint: lookup("ARISE_ENDPOINT"),
            api_key_env: lookup("ARISE_API_KEY_ENV"),
            temperature: parse(&lookup, "ARISE_TEMPERATURE")?,
            max_tokens: parse(&lookup, "ARISE_MAX_TOKENS")?,
            requests_per_minute: parse(&lookup, "ARISE_REQUESTS_PER_MINUTE")?,
            max_retries: parse(&lookup, "ARISE_MAX_RETRIES")?,
            timeout_secs: parse(&lookup, "ARISE_TIMEOUT_SECS")?,
            mode: json(&lookup, "ARISE_MODE")?,
            rag: parse(&lookup, "ARISE_RAG")?,
            rag_k: parse(&lookup, "ARISE_RAG_K")?,
            index: lookup("ARISE_INDEX").map(PathBuf::from),
            seed: parse(&lookup, "ARISE_SEED")?,
            policy: json(&lookup, "ARISE_POLICY")?,
            parallelism: parse(&lookup, "ARISE_PARALLELISM")?,
            escalation_high: parse(&lookup, "ARISE_ESCALATION_HIGH")?,
            escalation_medium: parse(&lookup, "ARISE_ESCALATION_MEDIUM")?,
        })
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub model: String,
    pub backend_config: BackendConfig,
    pub temperature: Option<f64>,
    pub max_tokens: u32,
    pub mode: PanelMode,
    pub rag: bool,
    pub rag_k: usize,
    pub index: Option<PathBuf>,
    pub seed: u64,
    pub policy: ExecPolicy,
    pub parallelism: Option<usize>,
    pub thresholds: EscalationThresholds,
}

impl Settings {
    pub fn resolve(layer: Layer) -> Settings {
        let defaults = BackendConfig::default();
        let thresholds = EscalationThresholds::default();
        Settings {
            backend: layer.backend.unwrap_or(BackendKind::Http),
            script: layer.script,
            model: layer.model.unwrap_or_else(|| "o1-mini".into()),
            backend_config: BackendConfig {
                endpoint_url: layer.endpoint.unwrap_or(defaults.endpoint_url),
                api_key_source: layer.api_key_env.unwrap_or(defaults.api_key_source),
                max_retries: layer.max_retries.unwrap_or(defaults.max_retries),
                backoff_base: defaults.backoff_base,
                requests_per_minute: layer.requests_per_minute.unwrap_or(defaults.requests_per_minute),
                timeout: layer.timeout_secs.map_or(defaults.timeout, Duration::from_secs),
            },
            temperature: layer.temperature,
            max_tokens: layer.max_tokens.unwrap_or(1024),
            mode: layer.mode.unwrap_or(PanelMode::Multi),
            rag: layer.rag.unwrap_or(true),
            rag_k: layer.rag_k.unwrap_or(DEFAULT_TOP_K),
            index: layer.index,
            seed: layer.seed.unwrap_or(DEFAULT_SEED),
            policy: layer.policy.unwrap_or_default(),
            parallelism: layer.parallelism,
            thresholds: EscalationThresholds {
                high: layer.escalation_high.unwrap_or(thresholds.high),
                medium: layer.escalation_medium.unwrap_or(thresholds.medium),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn precedence_flags_file_env_defaults() {
        let env = Layer::from_env(env(&[("ARISE_MODEL", "env-model"), ("ARISE_SEED", "5"), ("ARISE_MODE", "single")])).unwrap();
        let file: Layer = serde_json::from_str(r#"{"model": "file-model", "rag_k": 2}"#).unwrap();
        let flags = Layer {
            rag_k: Some(7),
            ..Layer::default()
        };
        let s = Settings::resolve(flags.over(file.over(env)));
        assert_eq!(s.model, "file-model");
        assert_eq!(s.rag_k, 7);
        assert_eq!(s.seed, 5);
        assert_eq!(s.mode, PanelMode::Single);
        assert_eq!(s.backend_config.api_key_source, "OPENAI_API_KEY");
        assert_eq!(s.backend, BackendKind::Http);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(Layer::from_env(env(&[("ARISE_SEED", "many")])).is_err());
        assert!(Layer::from_env(env(&[("ARISE_MODE", "both")])).is_err());
        assert!(serde_json::from_str::<Layer>(r#"{"modle": "x"}"#).is_err());
        assert_eq!(
            Layer::from_env(env(&[("ARISE_BACKEND", "Scripted")])).unwrap().backend,
            Some(BackendKind::Scripted)
        );
    }
}
