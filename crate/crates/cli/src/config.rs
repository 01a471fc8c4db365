use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use socratic_core::corpus::PromptOptions;
use socratic_core::eval::RougeComponent;
use socratic_core::llm_gateway::{DEFAULT_API_KEY_ENV, DEFAULT_MAX_IN_FLIGHT, DEFAULT_MAX_TOKENS};
use socratic_core::tinylm::{SamplingConfig, DEFAULT_BUCKETS};
use socratic_core::train::TrainConfig;

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_path: PathBuf,
    /// Directory of tagged transcripts read by `ingest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcripts_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gateway: GatewaySettings,
    #[serde(default)]
    pub prompt: PromptOptions,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub sft: TrainConfig,
    #[serde(default = "default_dpo")]
    pub dpo: TrainConfig,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Digest of the configuration as written, seed override included.
    #[serde(skip)]
    pub config_hash: String,
}

fn default_dpo() -> TrainConfig {
    TrainConfig {
        learning_rate: 5.0,
        epochs: 300,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub generation_temperature: f64,
    pub consistency_temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the credential.
    pub api_key_env: String,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: "gpt-4".into(),
            cache_dir: None,
            generation_temperature: 0.5,
            consistency_temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub bucket_count: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { bucket_count: DEFAULT_BUCKETS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub modes: Vec<DecodeMode>,
    pub p: f64,
    pub temperature: f64,
    pub k_return: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self {
            modes: vec![DecodeMode::Greedy, DecodeMode::Sample],
            p: s.p,
            temperature: s.temperature,
            k_return: s.k_return,
            max_len: s.max_len,
            seed: 0,
        }
    }
}

impl DecodeSettings {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            p: self.p,
            temperature: self.temperature,
            k_return: self.k_return,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub weight: RougeComponent,
    pub aggregate: AggregateMode,
}

impl PipelineConfig {
    /// Parse, apply the seed override, validate, hash, then resolve relative
    /// paths against `base`.
    pub fn from_json(text: &str, base: &Path, seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut config: Self = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| ConfigError(format!("at `{}`: {}", e.path(), e.inner())))?;
        if let Some(seed) = seed {
            config.sft.seed = seed;
            config.dpo.seed = seed;
            config.decode.seed = seed;
        }
        config.validate()?;
        config.config_hash = config.digest();
        config.resolve(base);
        Ok(config)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, seed)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.corpus_path);
        join(&mut self.output_dir);
        if let Some(p) = &mut self.transcripts_dir {
            join(p);
        }
        if let Some(p) = &mut self.gateway.cache_dir {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field: &str, msg: &str| Err(ConfigError(format!("at `{field}`: {msg}")));
        if self.corpus_path.as_os_str().is_empty() {
            return fail("corpus_path", "must not be empty");
        }
        if self.output_dir.as_os_str().is_empty() {
            return fail("output_dir", "must not be empty");
        }
        let g = &self.gateway;
        for (field, t) in [
            ("gateway.generation_temperature", g.generation_temperature),
            ("gateway.consistency_temperature", g.consistency_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return fail(field, "must be within [0, 2]");
            }
        }
        if g.model_name.is_empty() {
            return fail("gateway.model_name", "must not be empty");
        }
        if g.max_tokens == 0 {
            return fail("gateway.max_tokens", "must be positive");
        }
        if g.max_in_flight == 0 {
            return fail("gateway.max_in_flight", "must be positive");
        }
        if self.model.bucket_count == 0 {
            return fail("model.bucket_count", "must be positive");
        }
        for (field, t) in [("sft", &self.sft), ("dpo", &self.dpo)] {
            if let Err(e) = t.validate() {
                return fail(field, &e.to_string());
            }
        }
        if let Err(e) = self.decode.sampling().validate() {
            return fail("decode", &e.to_string());
        }
        if self.decode.k_return == 0 {
            return fail("decode.k_return", "must be positive");
        }
        if self.decode.max_len == 0 {
            return fail("decode.max_len", "must be positive");
        }
        if self.decode.modes.is_empty() {
            return fail("decode.modes", "must name at least one mode");
        }
        Ok(())
    }

    /// Paths enter as written, so relocating a run directory keeps the hash.
    fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"corpus_path": "c.json", "output_dir": "out"}"#;

    #[test]
    fn defaults_and_resolution() {
        let c = PipelineConfig::from_json(MINIMAL, Path::new("/base"), None).unwrap();
        assert_eq!(c.corpus_path, Path::new("/base/c.json"));
        assert_eq!(c.gateway.generation_temperature, 0.5);
        assert_eq!(c.gateway.consistency_temperature, 0.0);
        assert_eq!(c.decode.p, 0.9);
        assert_eq!(c.decode.k_return, 5);
        assert_eq!(c.dpo.beta, 0.1);
        assert_eq!(c.eval.weight, RougeComponent::F1);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = r#"{"corpus_path": "c", "output_dir": "o", "decode": {"p": "high"}}"#;
        let err = PipelineConfig::from_json(bad, Path::new("."), None).unwrap_err();
        assert!(err.0.contains("decode.p"), "{err}");

        let typo = r#"{"corpus_path": "c", "output_dir": "o", "gateway": {"temprature": 1}}"#;
        assert!(PipelineConfig::from_json(typo, Path::new("."), None).unwrap_err().0.contains("gateway"));

        let hot = r#"{"corpus_path": "c", "output_dir": "o", "gateway": {"generation_temperature": 3}}"#;
        let err = PipelineConfig::from_json(hot, Path::new("."), None).unwrap_err();
        assert!(err.0.contains("gateway.generation_temperature"));

        let empty = r#"{"corpus_path": "", "output_dir": "o"}"#;
        assert!(PipelineConfig::from_json(empty, Path::new("."), None).unwrap_err().0.contains("corpus_path"));
    }

    #[test]
    fn hash_tracks_effective_config() {
        let c = PipelineConfig::from_json(MINIMAL, Path::new("/b"), None).unwrap();
        assert_eq!(c.config_hash.len(), 16);
        let moved = PipelineConfig::from_json(MINIMAL, Path::new("/elsewhere"), None).unwrap();
        assert_eq!(c.config_hash, moved.config_hash);
        let seeded = PipelineConfig::from_json(MINIMAL, Path::new("/b"), Some(7)).unwrap();
        assert_ne!(c.config_hash, seeded.config_hash);
        assert_eq!(seeded.decode.seed, 7);
        assert_eq!(seeded.dpo.seed, 7);
    }
}
