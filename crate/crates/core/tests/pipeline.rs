mod common;

use std::sync::Arc;

use common::doubles::{confidence_grid, counted_components, Calls};
use naa_core::pipeline::{
    answer_query, export_feedback_for_training, record_feedback, ExportFilter, FeedbackRecord, FeedbackStore,
    GeneralRoute, OodStore, PipelineConfig, PipelineResult, QueryRegistry, Route, Verdict,
};

fn expected_route(gate: f64, intent: f64, cfg: &PipelineConfig) -> Route {
    if gate <= cfg.gate_threshold {
        Route::General
    } else if intent <= cfg.intent_threshold {
        Route::Ood
    } else {
        Route::Qa
    }
}

#[test]
fn routing_table() {
    let cfg = PipelineConfig::default();
    for g in confidence_grid() {
        for c in confidence_grid() {
            let (comp, calls) = counted_components(g, c);
            let r = answer_query("how do I reset my card pin", &comp, &cfg, &OodStore::in_memory()).unwrap();
            let want = expected_route(g, c, &cfg);
            assert_eq!(r.route, Some(want), "gate {g}, intent {c}");
            assert!(r.is_ok(), "{:?}", r.error);
            let n = |a| Calls::get(a);
            match want {
                Route::General => {
                    assert_eq!(
                        [n(&calls.intent), n(&calls.encoder), n(&calls.scorer), n(&calls.generator), n(&calls.chitchat)],
                        [0; 5]
                    );
                    assert!(r.contexts.is_empty() && r.draft_response.is_none());
                }
                Route::Ood => {
                    assert_eq!([n(&calls.scorer), n(&calls.generator)], [0, 0]);
                    assert!(n(&calls.encoder) > 0);
                    assert!(r.ood_record_id.is_some() && r.contexts.is_empty());
                }
                Route::Qa => {
                    assert!(n(&calls.encoder) > 0 && n(&calls.scorer) > 0 && n(&calls.generator) > 0);
                    assert_eq!(r.contexts.len(), cfg.top_n_contexts);
                    assert!(r.draft_response.is_some());
                }
            }
        }
    }
}

#[test]
fn chitchat_route_uses_only_the_chitchat_model() {
    let mut cfg = PipelineConfig { general_route: GeneralRoute::Chitchat, ..PipelineConfig::default() };
    cfg.checkpoints.chitchat = Some("stub:script".into());
    let (comp, calls) = counted_components(0.1, 0.9);
    let r = answer_query("tell me a joke", &comp, &cfg, &OodStore::in_memory()).unwrap();
    assert_eq!(r.route, Some(Route::General));
    assert_eq!(r.draft_response.unwrap().text, "Happy to chat!");
    assert_eq!(Calls::get(&calls.chitchat), 1);
    assert_eq!([Calls::get(&calls.encoder), Calls::get(&calls.generator)], [0, 0]);
}

fn comparable(r: &PipelineResult) -> serde_json::Value {
    let mut v = serde_json::to_value(r).unwrap();
    let o = v.as_object_mut().unwrap();
    o.remove("query_id");
    o.remove("latency_ms");
    o.remove("ood_record_id");
    v
}

#[test]
fn same_query_same_result() {
    let cfg = PipelineConfig::default();
    for (g, c) in [(0.9, 0.9), (0.9, 0.1), (0.1, 0.9)] {
        let (comp, _) = counted_components(g, c);
        let a = answer_query("wire transfer fee", &comp, &cfg, &OodStore::in_memory()).unwrap();
        let b = answer_query("wire  transfer fee ", &comp, &cfg, &OodStore::in_memory()).unwrap();
        assert_ne!(a.query_id, b.query_id);
        assert_eq!(comparable(&a), comparable(&b));
    }
}

#[test]
fn interleaved_feedback_writes_are_all_kept() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feedback.jsonl");
    let cfg = PipelineConfig::default();
    let (comp, _) = counted_components(0.9, 0.9);
    let store = Arc::new(FeedbackStore::open(Some(&path)).unwrap());
    let registry = Arc::new(QueryRegistry::new(1000));
    let ood = OodStore::in_memory();
    let results: Vec<PipelineResult> = (0..100)
        .map(|i| answer_query(&format!("reset my pin {i}"), &comp, &cfg, &ood).unwrap())
        .collect();
    for r in &results {
        registry.register(r);
    }
    let ids: Vec<uuid::Uuid> = std::thread::scope(|s| {
        let handles: Vec<_> = results
            .chunks(10)
            .enumerate()
            .map(|(t, chunk)| {
                let (store, registry) = (store.clone(), registry.clone());
                s.spawn(move || {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(i, r)| {
                            let (verdict, text) = match i % 3 {
                                0 => (Verdict::Approve, None),
                                1 => (Verdict::Edit, Some(format!("edited {t}-{i}"))),
                                _ => (Verdict::Reject, None),
                            };
                            let rec = FeedbackRecord::new(r.query_id, verdict, text, format!("agent{t}"));
                            record_feedback(rec, &registry, &store).unwrap()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(ids.len(), 100);
    assert_eq!(store.len(), 100);
    let exported = export_feedback_for_training(&store, &ExportFilter::default());
    assert_eq!(exported.len(), 70);
    let one_agent = ExportFilter { agent_id: Some("agent3".into()), since: None };
    assert_eq!(export_feedback_for_training(&store, &one_agent).len(), 7);

    let before = store.records();
    drop(store);
    let reopened = FeedbackStore::open(Some(&path)).unwrap();
    assert_eq!(reopened.records(), before);
    let lines = std::fs::read_to_string(&path).unwrap();
    assert_eq!(lines.lines().count(), 100);
    for l in lines.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
}
