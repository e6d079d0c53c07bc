//! Query routing: gate, intent, then either OOD keyword mining or
//! retrieve, re-rank and generate. Also the OOD and feedback stores.

mod components;
mod config;
mod store;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use components::{Components, Health, HealthStatus, STUB_POSITIVE_LABEL};
pub use config::{Checkpoints, GeneralRoute, PipelineConfig, StoreConfig, CONFIG_ENV, SCHEMA_VERSION};
pub use store::{
    export_feedback_for_training, record_feedback, record_ood_intent, ExportFilter, FeedbackRecord, FeedbackStore,
    IssuedQuery, OODIntentRecord, OodStore, QueryRegistry, Verdict,
};

use crate::generation::{generate_response, GeneratedResponse, Grounding};
use crate::intent::{classify_intent, extract_ood_keywords_with, gate_query, GateDecision, IntentPrediction};
use crate::retrieval::{rerank, RankedContext};
use crate::util::{normalize_whitespace, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("keyword set is empty")]
    EmptyKeywords,
    #[error("unknown query id {0}")]
    UnknownQuery(Uuid),
    #[error("invalid feedback: {0}")]
    Validation(String),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gate,
    Intent,
    Keywords,
    OodStore,
    Retrieve,
    Rerank,
    Generate,
    Chitchat,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Gate => "gate",
            Stage::Intent => "intent",
            Stage::Keywords => "keywords",
            Stage::OodStore => "ood_store",
            Stage::Retrieve => "retrieve",
            Stage::Rerank => "rerank",
            Stage::Generate => "generate",
            Stage::Chitchat => "chitchat",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    General,
    Ood,
    Qa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    pub score: f32,
}

/// Everything one query produced. On a stage failure `error` names the
/// stage and the fields filled before it are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub schema_version: u32,
    pub query_id: Uuid,
    pub query_text: String,
    /// `None` only when the gate or intent stage failed.
    pub route: Option<Route>,
    pub gate: Option<GateDecision>,
    pub intent: Option<IntentPrediction>,
    pub contexts: Vec<RankedContext>,
    pub draft_response: Option<GeneratedResponse>,
    pub ood_keywords: Option<Vec<Keyword>>,
    pub ood_record_id: Option<Uuid>,
    /// Per stage, plus `total`.
    pub latency_ms: BTreeMap<String, f64>,
    pub error: Option<StageError>,
}

impl PipelineResult {
    /// A result with a fresh time-ordered id and nothing filled in.
    pub fn empty(query_text: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            query_id: Uuid::now_v7(),
            query_text: query_text.to_string(),
            route: None,
            gate: None,
            intent: None,
            contexts: Vec::new(),
            draft_response: None,
            ood_keywords: None,
            ood_record_id: None,
            latency_ms: BTreeMap::new(),
            error: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

struct Run {
    result: PipelineResult,
    start: Instant,
}

impl Run {
    /// Times `f` under `stage`; a failure is recorded and ends the run.
    fn stage<T, E: std::fmt::Display>(
        &mut self,
        stage: Stage,
        f: impl FnOnce() -> std::result::Result<T, E>,
    ) -> std::result::Result<T, ()> {
        let t = Instant::now();
        let out = f();
        self.result
            .latency_ms
            .insert(stage.to_string(), t.elapsed().as_secs_f64() * 1e3);
        out.map_err(|e| {
            self.result.error = Some(StageError {
                stage,
                message: e.to_string(),
            })
        })
    }

    fn finish(mut self) -> PipelineResult {
        self.result
            .latency_ms
            .insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
        self.result
    }
}

fn missing(stage: Stage, c: &Components) -> String {
    c.load_errors
        .get(&stage)
        .map(|e| format!("{stage} stage unavailable: {e}"))
        .unwrap_or_else(|| format!("{stage} stage not loaded"))
}

/// Routes one query. Empty queries and invalid configs are errors; stage
/// failures come back inside the result.
pub fn answer_query(
    query: &str,
    components: &Components,
    config: &PipelineConfig,
    ood_store: &OodStore,
) -> Result<PipelineResult> {
    config.validate()?;
    let query = normalize_whitespace(query);
    if query.is_empty() {
        return Err(PipelineError::EmptyQuery);
    }
    let mut run = Run {
        result: PipelineResult::empty(&query),
        start: Instant::now(),
    };
    let _ = route(&query, components, config, ood_store, &mut run);
    Ok(run.finish())
}

fn route(
    query: &str,
    c: &Components,
    cfg: &PipelineConfig,
    ood_store: &OodStore,
    run: &mut Run,
) -> std::result::Result<(), ()> {
    let gate = run.stage(Stage::Gate, || {
        let g = c.gate.as_ref().ok_or_else(|| missing(Stage::Gate, c))?;
        gate_query(query, g, cfg.gate_threshold).map_err(|e| e.to_string())
    })?;
    run.result.gate = Some(gate);
    if !gate.in_domain {
        run.result.route = Some(Route::General);
        if cfg.general_route == GeneralRoute::Chitchat {
            let draft = run.stage(Stage::Chitchat, || {
                let lm = c.chitchat.as_ref().ok_or_else(|| missing(Stage::Chitchat, c))?;
                generate_response(lm.as_ref(), query, &[], &cfg.decoding, &cfg.layout).map_err(|e| e.to_string())
            })?;
            run.result.draft_response = Some(draft);
        }
        return Ok(());
    }

    let intent = run.stage(Stage::Intent, || {
        let m = c.intent.as_ref().ok_or_else(|| missing(Stage::Intent, c))?;
        classify_intent(query, m.as_ref()).map_err(|e| e.to_string())
    })?;
    let confident = intent.confidence > cfg.intent_threshold;
    run.result.intent = Some(intent);

    if !confident {
        run.result.route = Some(Route::Ood);
        let keywords = run.stage(Stage::Keywords, || {
            let enc = c.retriever.as_ref().ok_or_else(|| missing(Stage::Keywords, c))?;
            extract_ood_keywords_with(query, enc.as_ref(), &cfg.keywords).map_err(|e| e.to_string())
        })?;
        let keywords: Vec<Keyword> = keywords.into_iter().map(|(text, score)| Keyword { text, score }).collect();
        let texts: Vec<String> = keywords.iter().map(|k| k.text.clone()).collect();
        run.result.ood_keywords = Some(keywords);
        if !texts.is_empty() {
            let id = run.stage(Stage::OodStore, || record_ood_intent(&texts, query, ood_store))?;
            run.result.ood_record_id = Some(id);
        }
        return Ok(());
    }

    run.result.route = Some(Route::Qa);
    let hits = run.stage(Stage::Retrieve, || {
        let enc = c.retriever.as_ref().ok_or_else(|| missing(Stage::Retrieve, c))?;
        let index = c.index.as_ref().ok_or_else(|| missing(Stage::Retrieve, c))?;
        let hits = index.retrieve(query, enc.as_ref(), cfg.k_retrieve).map_err(|e| e.to_string())?;
        if hits.is_empty() {
            return Err("index returned no passages".to_string());
        }
        Ok(hits)
    })?;
    run.result.contexts = hits.clone();
    let contexts = run.stage(Stage::Rerank, || {
        let scorer = c.reranker.as_ref().ok_or_else(|| missing(Stage::Rerank, c))?;
        rerank(query, hits, scorer.as_ref(), cfg.top_n_contexts).map_err(|e| e.to_string())
    })?;
    run.result.contexts = contexts;
    let groundings: Vec<Grounding> = run
        .result
        .contexts
        .iter()
        .map(|r| Grounding::new(r.passage.passage_id.clone(), r.passage.context_text()))
        .collect();
    let draft = run.stage(Stage::Generate, || {
        let lm = c.generator.as_ref().ok_or_else(|| missing(Stage::Generate, c))?;
        generate_response(lm.as_ref(), query, &groundings, &cfg.decoding, &cfg.layout).map_err(|e| e.to_string())
    })?;
    run.result.draft_response = Some(draft);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub_config(dir: &std::path::Path) -> PipelineConfig {
        let kb = dir.join("kb.jsonl");
        let rows = [
            ("1", "how do I reset my card pin", "Use the mobile app under card settings."),
            ("2", "what is the wire transfer fee", "Wires cost 25 dollars."),
            ("3", "how do I open a savings account", "Apply online in ten minutes."),
            ("4", "can I raise my credit limit", "Request an increase after six months."),
        ];
        let lines: Vec<String> = rows
            .iter()
            .map(|(id, q, a)| serde_json::json!({"pair_id": id, "question": q, "answer": a}).to_string())
            .collect();
        std::fs::write(&kb, lines.join("\n")).unwrap();
        let mut cfg = PipelineConfig {
            kb: Some(kb),
            ..PipelineConfig::default()
        };
        cfg.checkpoints = Checkpoints::stubs();
        cfg
    }

    #[test]
    fn qa_route_fills_contexts_and_draft() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = stub_config(dir.path());
        let c = Components::load(&cfg);
        let r = answer_query("reset my card pin", &c, &cfg, &OodStore::in_memory()).unwrap();
        assert!(r.is_ok(), "{:?}", r.error);
        assert_eq!(r.route, Some(Route::Qa));
        assert_eq!(r.contexts.len(), cfg.top_n_contexts);
        assert!(!r.draft_response.unwrap().text.is_empty());
        for s in ["gate", "intent", "retrieve", "rerank", "generate", "total"] {
            assert!(r.latency_ms.contains_key(s), "{s}");
        }
    }

    #[test]
    fn missing_generator_keeps_contexts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = stub_config(dir.path());
        let mut c = Components::load(&cfg);
        c.generator = None;
        let r = answer_query("reset my card pin", &c, &cfg, &OodStore::in_memory()).unwrap();
        assert_eq!(r.error.as_ref().map(|e| e.stage), Some(Stage::Generate));
        assert_eq!(r.contexts.len(), 3);
        assert!(r.draft_response.is_none());
    }

    #[test]
    fn empty_query_is_rejected() {
        let c = Components::default();
        let r = answer_query("  ", &c, &PipelineConfig::default(), &OodStore::in_memory());
        assert!(matches!(r, Err(PipelineError::EmptyQuery)));
    }

    #[test]
    fn ood_route_records_keywords() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = stub_config(dir.path());
        cfg.checkpoints.intent = "stub:intent:0.4".into();
        // Two labels: the scripted top confidence is max(0.4, 0.6).
        let c = Components::load(&cfg);
        let store = OodStore::in_memory();
        let r = answer_query("crypto wallet transfer", &c, &cfg, &store).unwrap();
        assert_eq!(r.route, Some(Route::Qa));
        cfg.intent_threshold = 0.6;
        let r = answer_query("crypto wallet transfer", &c, &cfg, &store).unwrap();
        assert_eq!(r.route, Some(Route::Ood));
        assert!(r.contexts.is_empty() && r.draft_response.is_none());
        let id = r.ood_record_id.unwrap();
        assert_eq!(store.get(id).unwrap().count, 1);
    }

    #[test]
    fn result_json_is_versioned() {
        let v = serde_json::to_value(PipelineResult::empty("q")).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(serde_json::to_value(Stage::OodStore).unwrap(), "ood_store");
    }
}
