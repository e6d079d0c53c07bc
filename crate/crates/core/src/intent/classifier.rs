use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{IntentError, IntentLabelSet, IntentPrediction, Result};
use crate::backends::nn::device;
use crate::backends::{EncodeMode, ModelRegistry, TextEncoder};
use crate::util::normalize_whitespace;

const ARTIFACT_FILE: &str = "classifier.json";
const LABELS_FILE: &str = "labels.json";
const HEAD_FILE: &str = "head.safetensors";
const ENCODER_DIR: &str = "encoder";

/// Anything that maps a query to a distribution over a label set.
pub trait IntentModel: Send + Sync {
    fn labels(&self) -> &IntentLabelSet;

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<IntentPrediction>>;

    fn save(&self, dir: &Path) -> Result<()>;
}

/// Normalizes whitespace and classifies one query.
pub fn classify_intent(query: &str, model: &dyn IntentModel) -> Result<IntentPrediction> {
    let q = normalize_whitespace(query);
    if q.is_empty() {
        return Err(IntentError::EmptyQuery);
    }
    let mut out = model.predict_batch(&[&q])?;
    out.pop().ok_or_else(|| IntentError::Format("model returned no prediction".into()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Artifact {
    Linear { format_version: u32, encoder_checkpoint: String },
    Scripted(ScriptedIntent),
}

/// `softmax(W·embed(q) + b)` over a sentence encoder.
#[derive(Clone)]
pub struct IntentClassifier {
    encoder: Arc<dyn TextEncoder>,
    weight: Var,
    bias: Var,
    labels: IntentLabelSet,
}

impl std::fmt::Debug for IntentClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntentClassifier")
            .field("encoder", &self.encoder.spec().checkpoint_name)
            .field("labels", &self.labels.labels())
            .finish()
    }
}

impl IntentClassifier {
    /// Head drawn from N(0, 0.02²) under `seed`, zero bias.
    pub fn seeded(encoder: Arc<dyn TextEncoder>, labels: IntentLabelSet, seed: u64) -> Result<Self> {
        let d = encoder.spec().embedding_dim;
        let n = labels.len();
        let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        let weight = Tensor::from_vec(w, (n, d), &device())?;
        let bias = Tensor::zeros(n, DType::F32, &device())?;
        Self::from_parts(encoder, weight, bias, labels)
    }

    pub fn from_parts(encoder: Arc<dyn TextEncoder>, weight: Tensor, bias: Tensor, labels: IntentLabelSet) -> Result<Self> {
        let d = encoder.spec().embedding_dim;
        let n = labels.len();
        if weight.dims() != [n, d] || bias.dims() != [n] {
            return Err(IntentError::Config(format!(
                "head shapes {:?}/{:?} do not match {n} labels × {d} dims",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(Self {
            encoder,
            weight: Var::from_tensor(&weight.to_dtype(DType::F32)?)?,
            bias: Var::from_tensor(&bias.to_dtype(DType::F32)?)?,
            labels,
        })
    }

    pub fn encoder(&self) -> &Arc<dyn TextEncoder> {
        &self.encoder
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_tensor()
    }

    pub(crate) fn head_vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    /// Head logits for pre-computed embeddings `[n, d]`.
    pub fn head_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        Ok(embeddings
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    /// Graph-tracked logits `[n, N]`.
    pub fn logits(&self, texts: &[&str]) -> Result<Tensor> {
        let e = self.encoder.forward(texts, EncodeMode::Query)?;
        self.head_logits(&e)
    }
}

impl IntentModel for IntentClassifier {
    fn labels(&self) -> &IntentLabelSet {
        &self.labels
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<IntentPrediction>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(32) {
            let logits = self.logits(chunk)?.detach().to_vec2::<f32>()?;
            for row in logits {
                out.push(IntentPrediction::from_logits(&row, &self.labels)?);
            }
        }
        Ok(out)
    }

    /// Writes `classifier.json`, `labels.json`, `head.safetensors` and the
    /// encoder under `encoder/`.
    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.encoder.save(&dir.join(ENCODER_DIR))?;
        self.labels.save(&dir.join(LABELS_FILE))?;
        let mut head = HashMap::new();
        head.insert("weight".to_string(), self.weight.as_tensor().clone());
        head.insert("bias".to_string(), self.bias.as_tensor().clone());
        candle_core::safetensors::save(&head, dir.join(HEAD_FILE))?;
        write_artifact(
            dir,
            &Artifact::Linear {
                format_version: 1,
                encoder_checkpoint: self.encoder.spec().checkpoint_name.clone(),
            },
        )
    }
}

fn write_artifact(dir: &Path, a: &Artifact) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(ARTIFACT_FILE), serde_json::to_vec_pretty(a).expect("artifact serialises"))?;
    Ok(())
}

/// Loads a classifier saved by [`IntentModel::save`].
pub fn load_intent_model(dir: &Path, registry: &ModelRegistry) -> Result<Arc<dyn IntentModel>> {
    let raw = std::fs::read(dir.join(ARTIFACT_FILE))
        .map_err(|e| IntentError::Format(format!("{}: {e}", dir.join(ARTIFACT_FILE).display())))?;
    let artifact: Artifact = serde_json::from_slice(&raw).map_err(|e| IntentError::Format(e.to_string()))?;
    match artifact {
        Artifact::Scripted(s) => {
            s.validate()?;
            Ok(Arc::new(s))
        }
        Artifact::Linear { format_version, .. } => {
            if format_version != 1 {
                return Err(IntentError::Format(format!("unsupported format version {format_version}")));
            }
            let encoder_dir = dir.join(ENCODER_DIR);
            let encoder = registry.load_encoder(&encoder_dir.display().to_string())?;
            let labels = IntentLabelSet::load(&dir.join(LABELS_FILE))?;
            let mut head = candle_core::safetensors::load(dir.join(HEAD_FILE), &device())?;
            let take = |h: &mut HashMap<String, Tensor>, k: &str| {
                h.remove(k).ok_or_else(|| IntentError::Format(format!("head is missing `{k}`")))
            };
            let weight = take(&mut head, "weight")?;
            let bias = take(&mut head, "bias")?;
            Ok(Arc::new(IntentClassifier::from_parts(encoder, weight, bias, labels)?))
        }
    }
}

/// When a query contains `contains` (case-insensitive), `label` gets
/// probability `confidence` and the other labels share the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub contains: String,
    pub label: String,
    pub confidence: f64,
}

/// Rule-driven model for tests and demos. The first matching rule wins; an
/// empty `contains` always matches.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScriptedIntent {
    labels: IntentLabelSet,
    rules: Vec<ScriptRule>,
    fallback: ScriptRule,
    #[serde(skip)]
    calls: AtomicUsize,
}

impl Clone for ScriptedIntent {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            rules: self.rules.clone(),
            fallback: self.fallback.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl ScriptedIntent {
    pub fn new(labels: IntentLabelSet, fallback_label: &str, fallback_confidence: f64) -> Result<Self> {
        let s = Self {
            labels,
            rules: Vec::new(),
            fallback: ScriptRule {
                contains: String::new(),
                label: fallback_label.to_string(),
                confidence: fallback_confidence,
            },
            calls: AtomicUsize::new(0),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn rule(mut self, contains: &str, label: &str, confidence: f64) -> Result<Self> {
        self.rules.push(ScriptRule {
            contains: contains.to_lowercase(),
            label: label.to_string(),
            confidence,
        });
        self.validate()?;
        Ok(self)
    }

    /// Number of queries scored so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn validate(&self) -> Result<()> {
        for r in self.rules.iter().chain([&self.fallback]) {
            if self.labels.index_of(&r.label).is_none() {
                return Err(IntentError::UnknownLabel(r.label.clone()));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(IntentError::Config(format!("confidence {} outside [0, 1]", r.confidence)));
            }
        }
        Ok(())
    }

    fn predict_one(&self, text: &str) -> Result<IntentPrediction> {
        let lower = text.to_lowercase();
        let rule = self
            .rules
            .iter()
            .find(|r| lower.contains(&r.contains))
            .unwrap_or(&self.fallback);
        let n = self.labels.len();
        let target = self.labels.index_of(&rule.label).expect("validated");
        let rest = (1.0 - rule.confidence) / (n - 1) as f64;
        let probs = (0..n).map(|i| if i == target { rule.confidence } else { rest }).collect();
        IntentPrediction::from_probabilities(probs, &self.labels)
    }
}

impl IntentModel for ScriptedIntent {
    fn labels(&self) -> &IntentLabelSet {
        &self.labels
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<IntentPrediction>> {
        self.calls.fetch_add(texts.len(), Ordering::Relaxed);
        texts.iter().map(|t| self.predict_one(t)).collect()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_artifact(dir, &Artifact::Scripted(self.clone()))
    }
}
