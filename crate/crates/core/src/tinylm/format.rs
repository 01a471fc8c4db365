//! `tinylm/1` model files: a JSON document holding the shape, the vocabulary
//! and the logits table as base64-encoded little-endian `f32`, row-major.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{ModelError, PolicyParams, Vocab};

pub const MODEL_MAGIC: &str = "tinylm/1";
const PAYLOAD_ENCODING: &str = "base64-f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub magic: String,
    pub bucket_count: usize,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub vocab: Vec<String>,
    pub payload_encoding: String,
    pub logits: String,
}

impl PolicyParams {
    /// Logits are narrowed to `f32` on the way out.
    pub fn to_model_file(&self, meta: Option<serde_json::Value>) -> ModelFile {
        let mut bytes = Vec::with_capacity(self.logits.len() * 4);
        for &x in &self.logits {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        ModelFile {
            magic: MODEL_MAGIC.to_string(),
            bucket_count: self.bucket_count,
            vocab_size: self.vocab.len(),
            meta,
            vocab: self.vocab.tokens().to_vec(),
            payload_encoding: PAYLOAD_ENCODING.to_string(),
            logits: STANDARD.encode(bytes),
        }
    }

    pub fn to_model_json(&self, meta: Option<serde_json::Value>) -> String {
        let mut s = serde_json::to_string(&self.to_model_file(meta)).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_model_file(file: ModelFile) -> Result<(Self, Option<serde_json::Value>), ModelError> {
        if file.magic != MODEL_MAGIC {
            return Err(ModelError::Format(format!("bad magic `{}`", file.magic)));
        }
        if file.payload_encoding != PAYLOAD_ENCODING {
            return Err(ModelError::Format(format!(
                "unsupported payload encoding `{}`",
                file.payload_encoding
            )));
        }
        if file.vocab.len() != file.vocab_size {
            return Err(ModelError::Format(format!(
                "vocab has {} entries, header says {}",
                file.vocab.len(),
                file.vocab_size
            )));
        }
        let bytes = STANDARD
            .decode(file.logits.as_bytes())
            .map_err(|e| ModelError::Format(format!("payload: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(ModelError::Format("payload length not a multiple of 4".into()));
        }
        let logits = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let vocab = Vocab::from_tokens(file.vocab)?;
        Ok((Self::from_parts(vocab, file.bucket_count, logits)?, file.meta))
    }

    pub fn from_model_json(text: &str) -> Result<(Self, Option<serde_json::Value>), ModelError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_model_file(file)
    }
}
