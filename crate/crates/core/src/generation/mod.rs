//! Knowledge-grounded answer generation: dataset preprocessing, prompt
//! assembly, sampling-based decoding and multi-task fine-tuning.

mod decode;
mod msmarco;
mod prompt;
mod train;

use serde::{Deserialize, Serialize};

use crate::backends::BackendError;
use crate::util::JsonlError;

pub use decode::{
    generate_response, generate_tokens, next_token_distribution, sample_next_token, GeneratedResponse,
    Grounding,
};
pub use msmarco::{preprocess_msmarco, preprocess_msmarco_lines, MsmarcoSkip, MsmarcoStats};
pub use prompt::{assemble_prompt, AssembledPrompt, PromptLayout, DEFAULT_MAX_INPUT_TOKENS};
pub use train::{
    answer_lm_loss, build_mc_instance, combine_losses, encode_mc_instance, generator_loss_parts,
    train_generator, EncodedMc, GenTrainConfig, GenTrainLog, LossParts, MCInstance,
};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("question needs {len} tokens but the prompt budget is {budget}")]
    QuestionTooLong { len: usize, budget: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("need {needed} distinct distractor answers, corpus offers {available}")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("no training records")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every logit is -inf or NaN")]
    NoFiniteLogits,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<candle_core::Error> for GenerationError {
    fn from(e: candle_core::Error) -> Self {
        Self::Backend(e.into())
    }
}

pub type Result<T, E = GenerationError> = std::result::Result<T, E>;

/// A question, its reference answer and grounding passages.
/// JSONL form: `{"question","answer","contexts":[...],"well_formed":bool}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub question: String,
    pub answer: String,
    #[serde(rename = "contexts", default)]
    pub context_passages: Vec<String>,
    #[serde(default)]
    pub well_formed: bool,
}

impl QARecord {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(GenerationError::InvalidRecord("empty question".into()));
        }
        if self.answer.trim().is_empty() {
            return Err(GenerationError::InvalidRecord("empty answer".into()));
        }
        Ok(())
    }

    /// Contexts paired with positional ids `ctx0`, `ctx1`, ...
    pub fn groundings(&self) -> Vec<Grounding> {
        self.context_passages
            .iter()
            .enumerate()
            .map(|(i, t)| Grounding::new(format!("ctx{i}"), t.clone()))
            .collect()
    }
}

pub fn load_qa_records(path: &std::path::Path) -> Result<Vec<QARecord>> {
    let records: Vec<QARecord> = crate::util::read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| GenerationError::InvalidRecord(format!("{}:{}: {e}", path.display(), i + 1)))?;
    }
    Ok(records)
}
