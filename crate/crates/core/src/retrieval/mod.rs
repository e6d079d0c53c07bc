//! Knowledge-base ingestion, sentence-window chunking, exact dense search,
//! cross-encoder re-ranking, and contrastive fine-tuning of both stages.

mod chunk;
mod index;
mod mnrl;
mod rerank;
mod train;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use chunk::{chunk_document, clean_text, sentence_spans, split_sentences, ChunkingConfig};
pub use index::{build_index, EmbeddingIndex, Similarity};
pub use mnrl::{mnrl_loss, MnrlConfig};
pub use rerank::{rerank, RankedContext};
pub use train::{
    prepare_eli5_pairs, train_bi_encoder, train_cross_encoder, BiEncoderTrainConfig, CrossEncoderTrainConfig,
    Eli5Record, Eli5Split, RetrievalTrainLog, TrainingPair,
};

use crate::backends::BackendError;
use crate::util::JsonlError;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("document `{0}` has no text")]
    EmptyDocument(String),
    #[error("no training pairs")]
    EmptyTrainingSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}:{line}: {message}")]
    Kb { path: String, line: usize, message: String },
    #[error("malformed index: {0}")]
    Format(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<candle_core::Error> for RetrievalError {
    fn from(e: candle_core::Error) -> Self {
        Self::Backend(e.into())
    }
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub pair_id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusVariant {
    Raw,
    Clean,
}

/// Retrieval unit. For question-answer KBs the question is the indexed text
/// and the answer rides along as payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub text: String,
    /// Half-open sentence range within the source document.
    pub sentence_span: (usize, usize),
    pub corpus_variant: CorpusVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl Passage {
    pub fn from_qa(pair: &QAPair) -> Self {
        Self {
            passage_id: pair.pair_id.clone(),
            doc_id: pair.pair_id.clone(),
            text: pair.question.clone(),
            sentence_span: (0, 1),
            corpus_variant: CorpusVariant::Raw,
            answer: Some(pair.answer.clone()),
        }
    }

    /// Text handed to the generator: the answer for QA entries, else the passage.
    pub fn context_text(&self) -> String {
        match &self.answer {
            Some(a) => format!("{} {}", self.text, a),
            None => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KnowledgeBase {
    Documents(Vec<Document>),
    QaPairs(Vec<QAPair>),
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        match self {
            Self::Documents(d) => d.len(),
            Self::QaPairs(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Passages for indexing: chunked documents, or one passage per QA pair.
    pub fn passages(&self, cfg: &ChunkingConfig) -> Result<Vec<Passage>> {
        match self {
            Self::Documents(docs) => {
                let mut out = Vec::new();
                for d in docs {
                    out.extend(chunk_document(d, cfg)?);
                }
                Ok(out)
            }
            Self::QaPairs(pairs) => Ok(pairs.iter().map(Passage::from_qa).collect()),
        }
    }
}

/// Loads a JSON-lines KB of documents or of QA pairs. Mixed files, duplicate
/// ids and empty fields are rejected.
pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, message: String| RetrievalError::Kb {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut docs = Vec::new();
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        let id = if value.get("doc_id").is_some() {
            let d: Document = serde_json::from_value(value).map_err(|e| err(line, e.to_string()))?;
            if d.text.trim().is_empty() {
                return Err(err(line, format!("document `{}` has no text", d.doc_id)));
            }
            let id = d.doc_id.clone();
            docs.push(d);
            id
        } else if value.get("pair_id").is_some() {
            let q: QAPair = serde_json::from_value(value).map_err(|e| err(line, e.to_string()))?;
            if q.question.trim().is_empty() || q.answer.trim().is_empty() {
                return Err(err(line, format!("pair `{}` needs a question and an answer", q.pair_id)));
            }
            let id = q.pair_id.clone();
            pairs.push(q);
            id
        } else {
            return Err(err(line, "record has neither `doc_id` nor `pair_id`".into()));
        };
        if !docs.is_empty() && !pairs.is_empty() {
            return Err(err(line, "documents and QA pairs cannot be mixed in one KB".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(err(line, format!("duplicate id `{id}`")));
        }
    }
    Ok(if pairs.is_empty() {
        KnowledgeBase::Documents(docs)
    } else {
        KnowledgeBase::QaPairs(pairs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb(lines: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), lines).unwrap();
        f
    }

    #[test]
    fn loads_documents_and_pairs() {
        let f = kb(r#"{"doc_id":"d1","text":"One. Two.","source":"faq"}
{"doc_id":"d2","title":"T","text":"Three.","source":"faq"}
"#);
        assert!(matches!(load_kb(f.path()).unwrap(), KnowledgeBase::Documents(d) if d.len() == 2));
        let f = kb(r#"{"pair_id":"p1","question":"q?","answer":"a."}"#);
        assert!(matches!(load_kb(f.path()).unwrap(), KnowledgeBase::QaPairs(p) if p.len() == 1));
    }

    #[test]
    fn rejects_mixed_and_duplicates() {
        let f = kb(r#"{"doc_id":"d1","text":"x","source":""}
{"pair_id":"p1","question":"q","answer":"a"}"#);
        assert!(matches!(load_kb(f.path()), Err(RetrievalError::Kb { line: 2, .. })));
        let f = kb(r#"{"doc_id":"d1","text":"x"}
{"doc_id":"d1","text":"y"}"#);
        assert!(load_kb(f.path()).is_err());
    }

    #[test]
    fn qa_passages_carry_answers() {
        let kb = KnowledgeBase::QaPairs(vec![QAPair {
            pair_id: "p".into(),
            question: "How do I reset my PIN?".into(),
            answer: "Visit a branch.".into(),
        }]);
        let p = kb.passages(&ChunkingConfig::default()).unwrap();
        assert_eq!(p[0].text, "How do I reset my PIN?");
        assert_eq!(p[0].context_text(), "How do I reset my PIN? Visit a branch.");
    }
}
