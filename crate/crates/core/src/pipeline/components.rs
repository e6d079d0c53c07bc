use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GeneralRoute, PipelineConfig, Stage};
use crate::backends::{LanguageModel, ModelRegistry, PairScorer, TextEncoder};
use crate::intent::{load_gate, load_intent_model, GateModel, IntentLabelSet, IntentModel, ScriptedIntent};
use crate::retrieval::{build_index, load_kb, ChunkingConfig, EmbeddingIndex, Similarity};

/// Loaded models for each stage. A stage whose model failed to load is
/// `None`; queries reaching it end with a stage error.
#[derive(Clone, Default)]
pub struct Components {
    pub gate: Option<GateModel>,
    pub intent: Option<Arc<dyn IntentModel>>,
    /// Query encoder for retrieval, also used to rank OOD keywords.
    pub retriever: Option<Arc<dyn TextEncoder>>,
    pub index: Option<Arc<EmbeddingIndex>>,
    pub reranker: Option<Arc<dyn PairScorer>>,
    pub generator: Option<Arc<dyn LanguageModel>>,
    pub chitchat: Option<Arc<dyn LanguageModel>>,
    /// Why a stage is missing.
    pub load_errors: BTreeMap<Stage, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: HealthStatus,
    /// `"loaded"` or the load error, per stage.
    pub stages: BTreeMap<Stage, String>,
    /// Stages that cannot run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<Stage>,
}

/// Default positive label of `stub:gate` gates.
pub const STUB_POSITIVE_LABEL: &str = "in_domain";

/// `stub:<kind>` or `stub:<kind>:<p>`.
fn stub_confidence(name: &str, kind: &str, default: f64) -> Option<Result<f64, String>> {
    let rest = name.strip_prefix("stub:")?.strip_prefix(kind)?;
    match rest {
        "" => Some(Ok(default)),
        r => {
            let p = r.strip_prefix(':')?;
            Some(
                p.parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| format!("`{name}`: expected a probability after `{kind}:`")),
            )
        }
    }
}

fn load_gate_named(name: &str, registry: &ModelRegistry) -> Result<GateModel, String> {
    if let Some(p) = stub_confidence(name, "gate", 1.0) {
        return GateModel::scripted(STUB_POSITIVE_LABEL, p?).map_err(|e| e.to_string());
    }
    let dir = registry.resolve(name).map_err(|e| e.to_string())?;
    load_gate(&dir, registry).map_err(|e| e.to_string())
}

fn load_intent_named(name: &str, registry: &ModelRegistry) -> Result<Arc<dyn IntentModel>, String> {
    if let Some(p) = stub_confidence(name, "intent", 0.9) {
        let labels = IntentLabelSet::new(vec!["faq".into(), "other".into()]).map_err(|e| e.to_string())?;
        let s = ScriptedIntent::new(labels, "faq", p?).map_err(|e| e.to_string())?;
        return Ok(Arc::new(s));
    }
    let dir = registry.resolve(name).map_err(|e| e.to_string())?;
    load_intent_model(&dir, registry).map_err(|e| e.to_string())
}

fn keep<T>(errors: &mut BTreeMap<Stage, String>, stage: Stage, r: Result<T, String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            tracing::warn!(stage = %stage, error = %e, "stage unavailable");
            errors.insert(stage, e);
            None
        }
    }
}

fn load_index(cfg: &PipelineConfig, encoder: Option<&Arc<dyn TextEncoder>>) -> Result<EmbeddingIndex, String> {
    if let Some(dir) = &cfg.index {
        let index = EmbeddingIndex::load(dir).map_err(|e| e.to_string())?;
        if index.encoder_checkpoint() != cfg.checkpoints.retriever {
            tracing::warn!(
                index = index.encoder_checkpoint(),
                retriever = %cfg.checkpoints.retriever,
                "index was built with a different encoder"
            );
        }
        return Ok(index);
    }
    let Some(kb) = &cfg.kb else {
        return Err("neither `index` nor `kb` is configured".into());
    };
    let encoder = encoder.ok_or("retriever encoder unavailable")?;
    let passages = load_kb(kb)
        .and_then(|kb| kb.passages(&ChunkingConfig::default()))
        .map_err(|e| e.to_string())?;
    build_index(passages, encoder.as_ref(), Similarity::Dot).map_err(|e| e.to_string())
}

impl Components {
    /// Loads every stage named in `cfg`, recording failures instead of
    /// aborting.
    pub fn load(cfg: &PipelineConfig) -> Self {
        let registry = cfg.registry();
        let cp = &cfg.checkpoints;
        let mut errors = BTreeMap::new();
        let gate = keep(&mut errors, Stage::Gate, load_gate_named(&cp.gate, &registry));
        let intent = keep(&mut errors, Stage::Intent, load_intent_named(&cp.intent, &registry));
        let retriever = keep(&mut errors, Stage::Retrieve, registry.load_encoder(&cp.retriever).map_err(|e| e.to_string()));
        let index = match &retriever {
            Some(enc) => keep(&mut errors, Stage::Retrieve, load_index(cfg, Some(enc)).map(Arc::new)),
            None => None,
        };
        let reranker = keep(&mut errors, Stage::Rerank, registry.load_pair_scorer(&cp.reranker).map_err(|e| e.to_string()));
        let generator = keep(&mut errors, Stage::Generate, registry.load_generator(&cp.generator).map_err(|e| e.to_string()));
        let chitchat = match (&cp.chitchat, cfg.general_route) {
            (Some(name), GeneralRoute::Chitchat) => {
                keep(&mut errors, Stage::Chitchat, registry.load_generator(name).map_err(|e| e.to_string()))
            }
            _ => None,
        };
        Self {
            gate,
            intent,
            retriever,
            index,
            reranker,
            generator,
            chitchat,
            load_errors: errors,
        }
    }

    /// Per-stage readiness for the routes `cfg` can take.
    pub fn health(&self, cfg: &PipelineConfig) -> Health {
        let mut stages = BTreeMap::new();
        let mut check = |stage: Stage, ready: bool| {
            let status = if ready {
                "loaded".to_string()
            } else {
                self.load_errors.get(&stage).cloned().unwrap_or_else(|| "not loaded".into())
            };
            stages.insert(stage, status);
        };
        check(Stage::Gate, self.gate.is_some());
        check(Stage::Intent, self.intent.is_some());
        check(Stage::Keywords, self.retriever.is_some());
        check(Stage::Retrieve, self.retriever.is_some() && self.index.is_some());
        check(Stage::Rerank, self.reranker.is_some());
        check(Stage::Generate, self.generator.is_some());
        if cfg.general_route == GeneralRoute::Chitchat {
            check(Stage::Chitchat, self.chitchat.is_some());
        }
        let missing: Vec<Stage> = stages.iter().filter(|(_, s)| *s != "loaded").map(|(k, _)| *k).collect();
        Health {
            status: if missing.is_empty() { HealthStatus::Ok } else { HealthStatus::Degraded },
            stages,
            missing,
        }
    }
}
