//! Artifact file names, the provenance stamp every artifact carries, and
//! read/write helpers that turn absent inputs into actionable errors.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use socratic_core::augment::{read_jsonl, write_jsonl};
use socratic_core::tinylm::PolicyParams;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const GENERATED_INVALID: &str = "generated_invalid.jsonl";
pub const CONSISTENCY_REPORT: &str = "consistency_report.json";
pub const PREFS: &str = "prefs.jsonl";
pub const MODEL_SFT: &str = "model.sft";
pub const MODEL_DPO: &str = "model.dpo";
pub const SFT_LOSS: &str = "sft_loss.jsonl";
pub const DPO_LOSS: &str = "dpo_loss.jsonl";
pub const GENERATIONS: &str = "generations.jsonl";
pub const REPORT: &str = "report.json";

/// A missing or unusable upstream artifact; maps to exit code 3.
#[derive(Debug)]
pub struct ArtifactError {
    pub path: PathBuf,
    pub problem: String,
    /// Subcommand that produces the artifact.
    pub producer: &'static str,
}

impl fmt::Display for ArtifactError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}; run `socratic {}` to produce it",
            self.path.display(),
            self.problem,
            self.producer
        )
    }
}

impl std::error::Error for ArtifactError {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub toolkit_version: String,
}

impl Provenance {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            toolkit_version: TOOLKIT_VERSION.to_string(),
        }
    }
}

/// A record with the provenance fields inlined next to its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(flatten)]
    pub record: T,
}

impl<T> Stamped<T> {
    pub fn new(provenance: &Provenance, record: T) -> Self {
        Self {
            provenance: provenance.clone(),
            record,
        }
    }
}

fn require(path: &Path, producer: &'static str) -> Result<(), ArtifactError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ArtifactError {
            path: path.to_path_buf(),
            problem: "not found".into(),
            producer,
        })
    }
}

fn unusable(path: &Path, producer: &'static str, e: impl fmt::Display) -> ArtifactError {
    ArtifactError {
        path: path.to_path_buf(),
        problem: e.to_string(),
        producer,
    }
}

pub fn read_records<T: DeserializeOwned>(path: &Path, producer: &'static str) -> anyhow::Result<Vec<T>> {
    require(path, producer)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(file)).map_err(|e| unusable(path, producer, e))?)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    write_bytes(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_model(path: &Path, producer: &'static str) -> anyhow::Result<PolicyParams> {
    require(path, producer)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (params, _meta) = PolicyParams::from_model_json(&text).map_err(|e| unusable(path, producer, e))?;
    Ok(params)
}

pub fn read_text(path: &Path, producer: &'static str) -> anyhow::Result<Vec<u8>> {
    require(path, producer)?;
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamped_records_are_flat() {
        #[derive(Debug, PartialEq, Serialize, Deserialize)]
        struct R {
            x: u32,
        }
        let s = Stamped::new(&Provenance::new("abc"), R { x: 1 });
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, format!(r#"{{"config_hash":"abc","toolkit_version":"{TOOLKIT_VERSION}","x":1}}"#));
        assert_eq!(serde_json::from_str::<Stamped<R>>(&json).unwrap(), s);
    }

    #[test]
    fn missing_artifact_names_producer() {
        let err = read_records::<serde_json::Value>(Path::new("/nonexistent/prefs.jsonl"), "build-prefs").unwrap_err();
        let artifact = err.downcast_ref::<ArtifactError>().unwrap();
        assert_eq!(artifact.producer, "build-prefs");
        assert!(err.to_string().contains("socratic build-prefs"));
    }
}
