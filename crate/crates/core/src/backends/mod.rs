//! Contracts for the pretrained neural models.
//!
//! Every other module talks to models only through the four traits here:
//! [`TextEncoder`], [`PairScorer`], [`LanguageModel`] and [`Translator`].
//! Implementations come from two places:
//!
//! - [`stub`]: deterministic, weight-free backends selected by the `stub:`
//!   checkpoint prefix. Hash embeddings, a scripted generator, identity
//!   translation, and seeded tiny transformers that can be trained.
//! - [`nn`]: a transformer runtime (BERT/DistilBERT encoders, BERT
//!   cross-encoders, GPT-2 language models) loading safetensors checkpoints
//!   from a model directory.
//!
//! Handles are immutable after load and safe to share across threads.
//! Training never mutates a loaded handle: trainers call `fork` first and
//! update the copy.

pub mod nn;
mod registry;
pub mod stub;
pub mod tokenize;

use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use registry::{ModelRegistry, MODEL_DIR_ENV};
pub use tokenize::{GenTokenizer, SpecialTokens};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable for checkpoint `{checkpoint}`: {reason}")]
    Unavailable { checkpoint: String, reason: String },
    #[error("input of {len} tokens exceeds the context window of {max} tokens")]
    InputTooLong { len: usize, max: usize },
    #[error("unsupported language pair {source_lang}->{target_lang}")]
    UnsupportedLanguagePair {
        source_lang: String,
        target_lang: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("tensor operation failed: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn unavailable(checkpoint: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Unavailable {
            checkpoint: checkpoint.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

/// How token states are reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    FirstToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub checkpoint_name: String,
    pub embedding_dim: usize,
    pub max_tokens: usize,
    pub pooling: Pooling,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.max_tokens == 0 {
            return Err(BackendError::InvalidConfig(format!(
                "encoder `{}` needs a positive dimension and token limit",
                self.checkpoint_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub checkpoint_name: String,
    pub vocab_size: usize,
    pub max_context_tokens: usize,
}

/// Encoding role for asymmetric search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Query,
    Passage,
}

/// Sampling knobs for autoregressive decoding. `top_k == 0` and
/// `top_p == 0.0` disable the respective filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 200,
            temperature: 0.7,
            top_k: 100,
            top_p: 0.0,
            seed: 0,
        }
    }
}

impl DecodingConfig {
    pub fn greedy() -> Self {
        Self {
            top_k: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(BackendError::InvalidConfig(format!(
                "top_p must lie in [0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Bi-encoder side of retrieval: text to fixed-length vectors.
pub trait TextEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Graph-tracked forward pass, `[n, d]`. Inputs past `max_tokens` are
    /// truncated silently.
    fn forward(&self, texts: &[&str], mode: EncodeMode) -> Result<Tensor>;

    /// Row `i` is the embedding of `texts[i]`.
    fn encode(&self, texts: &[&str], mode: EncodeMode) -> Result<Array2<f32>> {
        let d = self.spec().embedding_dim;
        if texts.is_empty() {
            return Ok(Array2::zeros((0, d)));
        }
        let mut rows = Vec::with_capacity(texts.len() * d);
        for chunk in texts.chunks(32) {
            let t = self.forward(chunk, mode)?.detach();
            rows.extend(t.flatten_all()?.to_vec1::<f32>()?);
        }
        Array2::from_shape_vec((texts.len(), d), rows)
            .map_err(|e| BackendError::Format(e.to_string()))
    }

    /// Parameters updated by fine-tuning. Frozen backends return none.
    fn trainable_vars(&self) -> Vec<Var> {
        Vec::new()
    }

    /// Deep copy whose parameters can be trained without touching `self`.
    fn fork(&self) -> Result<Arc<dyn TextEncoder>>;

    /// Digest of every parameter value.
    fn checksum(&self) -> u64;

    /// Persists the encoder so [`ModelRegistry`] can load it back from `dir`.
    fn save(&self, dir: &Path) -> Result<()>;
}

/// Cross-encoder: joint relevance score per (query, passage) pair.
pub trait PairScorer: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Graph-tracked scores, shape `[n]`.
    fn forward(&self, pairs: &[(&str, &str)]) -> Result<Tensor>;

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(32) {
            out.extend(self.forward(chunk)?.detach().to_vec1::<f32>()?);
        }
        Ok(out)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        Vec::new()
    }

    fn fork(&self) -> Result<Arc<dyn PairScorer>>;

    fn checksum(&self) -> u64;

    fn save(&self, dir: &Path) -> Result<()>;
}

/// A token sequence with a segment-type id per token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub segments: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, segment: u32) {
        self.ids.push(id);
        self.segments.push(segment);
    }
}

/// Outputs of a training forward pass over a padded batch.
pub struct LmOutputs {
    /// `[batch, time, vocab]`
    pub lm_logits: Tensor,
    /// `[batch]`, present when classification positions were supplied.
    pub mc_logits: Option<Tensor>,
}

/// Incremental decoding state. `feed` appends tokens and returns the
/// next-token logits after the last one.
pub trait LogitsSession {
    fn feed(&mut self, ids: &[u32], segments: &[u32]) -> Result<Vec<f32>>;
}

/// Autoregressive generator with an optional candidate-discrimination head.
pub trait LanguageModel: Send + Sync {
    fn spec(&self) -> &GeneratorSpec;

    fn tokenizer(&self) -> &GenTokenizer;

    fn session(&self) -> Box<dyn LogitsSession + '_>;

    /// Runs right-padded sequences. `mc_positions[i]` selects the token whose
    /// hidden state feeds the discrimination head for sequence `i`.
    fn forward_train(&self, seqs: &[TokenSeq], mc_positions: Option<&[usize]>)
        -> Result<LmOutputs>;

    fn trainable_vars(&self) -> Vec<Var> {
        Vec::new()
    }

    fn fork(&self) -> Result<Arc<dyn LanguageModel>>;

    fn checksum(&self) -> u64;

    fn save(&self, dir: &Path) -> Result<()>;
}

pub trait Translator: Send + Sync {
    fn name(&self) -> &str;

    fn supports(&self, source_lang: &str, target_lang: &str) -> bool;

    /// One output per input, order preserved.
    fn translate(&self, texts: &[&str], source_lang: &str, target_lang: &str)
        -> Result<Vec<String>>;
}

/// Writes the small JSON manifest that names a `stub:` backend, so stub
/// models round-trip through the same save/load path as real ones.
pub(crate) fn save_stub_manifest(dir: &Path, kind: &str, checkpoint: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({ "kind": kind, "stub": checkpoint });
    std::fs::write(
        dir.join(nn::MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest).expect("static json"),
    )?;
    Ok(())
}
