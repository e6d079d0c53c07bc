//! Intent identification: linear heads over sentence encoders, binary
//! domain gates, augmentation, few-shot adaptation and keyword mining for
//! out-of-domain queries.

mod augment;
mod classifier;
mod gate;
mod keywords;
mod train;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::BackendError;
use crate::util::{normalize_whitespace, read_jsonl, JsonlError};

pub use augment::{augment_back_translation, augment_insertion, mix_augmented, AugmentStats, AugmentationConfig};
pub use classifier::{classify_intent, load_intent_model, IntentClassifier, IntentModel, ScriptRule, ScriptedIntent};
pub use gate::{gate_query, load_gate, train_domain_gate, GateDecision, GateModel, GENERAL_LABEL};
pub use keywords::{extract_ood_keywords, extract_ood_keywords_with, KeywordConfig, STOPWORDS};
pub use train::{
    few_shot_adapt, sample_support_set, train_intent_classifier, FewShotConfig, IntentTrainConfig, StopReason,
    TrainReport,
};

#[derive(Debug, thiserror::Error)]
pub enum IntentError {
    #[error("invalid label set: {0}")]
    Labels(String),
    #[error("label index {index} outside 0..{n}")]
    LabelOutOfRange { index: usize, n: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("no training examples{0}")]
    EmptyTrainingSet(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<candle_core::Error> for IntentError {
    fn from(e: candle_core::Error) -> Self {
        Self::Backend(e.into())
    }
}

pub type Result<T, E = IntentError> = std::result::Result<T, E>;

/// Ordered, distinct labels; position is the class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct IntentLabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl IntentLabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(IntentError::Labels(format!("need at least 2 labels, got {}", labels.len())));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(IntentError::Labels("empty label".into()));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(IntentError::Labels(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Sorted distinct labels of `examples`.
    pub fn from_examples(examples: &[LabeledText]) -> Result<Self> {
        let set: BTreeSet<&str> = examples.iter().map(|e| e.label.as_str()).collect();
        Self::new(set.into_iter().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.labels).expect("labels serialise"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let labels: Vec<String> =
            serde_json::from_slice(&std::fs::read(path)?).map_err(|e| IntentError::Format(e.to_string()))?;
        Self::new(labels)
    }
}

impl TryFrom<Vec<String>> for IntentLabelSet {
    type Error = IntentError;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<IntentLabelSet> for Vec<String> {
    fn from(s: IntentLabelSet) -> Self {
        s.labels
    }
}

/// On-disk training record: `{"text","label"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub text: String,
    pub label_index: usize,
}

impl LabeledQuery {
    /// Normalizes whitespace; rejects empty text.
    pub fn new(text: &str, label_index: usize) -> Result<Self> {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(IntentError::EmptyQuery);
        }
        Ok(Self { text, label_index })
    }
}

/// Maps labeled texts onto `labels`; unknown labels are errors.
pub fn index_examples(examples: &[LabeledText], labels: &IntentLabelSet) -> Result<Vec<LabeledQuery>> {
    examples
        .iter()
        .map(|e| {
            let i = labels
                .index_of(&e.label)
                .ok_or_else(|| IntentError::UnknownLabel(e.label.clone()))?;
            LabeledQuery::new(&e.text, i)
        })
        .collect()
}

/// Reads `{"text","label"}` lines.
pub fn load_labeled(path: &Path) -> Result<Vec<LabeledText>> {
    Ok(read_jsonl(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentPrediction {
    pub probabilities: Vec<f64>,
    pub top_label: String,
    pub top_index: usize,
    /// `probabilities[top_index]`
    pub confidence: f64,
}

impl IntentPrediction {
    /// Softmax in f64; the first maximum wins ties.
    pub fn from_logits(logits: &[f32], labels: &IntentLabelSet) -> Result<Self> {
        if logits.len() != labels.len() {
            return Err(IntentError::Config(format!(
                "{} logits for {} labels",
                logits.len(),
                labels.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(IntentError::Format("non-finite logit".into()));
        }
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (f64::from(l) - f64::from(max)).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self::from_probabilities(exps.into_iter().map(|e| e / sum).collect(), labels)
    }

    pub fn from_probabilities(probabilities: Vec<f64>, labels: &IntentLabelSet) -> Result<Self> {
        if probabilities.len() != labels.len() {
            return Err(IntentError::Config("probability vector does not match labels".into()));
        }
        let mut top = 0;
        for (i, p) in probabilities.iter().enumerate() {
            if *p > probabilities[top] {
                top = i;
            }
        }
        Ok(Self {
            confidence: probabilities[top],
            top_label: labels.labels[top].clone(),
            top_index: top,
            probabilities,
        })
    }

    pub fn probability_of(&self, index: usize) -> f64 {
        self.probabilities.get(index).copied().unwrap_or(0.0)
    }
}
