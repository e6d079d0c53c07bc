use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, bleu1, macro_f1, mean_average_precision, mrr, rouge1, rouge_l, token_f1};
use super::{EvalError, EvalReport, Protocol, RankingJudgment};
use crate::backends::{DecodingConfig, LanguageModel, PairScorer, TextEncoder};
use crate::generation::{generate_response, PromptLayout, QARecord};
use crate::intent::{IntentModel, LabeledQuery};
use crate::retrieval::{rerank, CorpusVariant, EmbeddingIndex, Passage, TrainingPair};

/// A query with the passage ids that answer it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalFixture {
    pub query_id: String,
    pub query: String,
    pub relevant_ids: Vec<String>,
}

fn stage(stage: &'static str) -> impl Fn(String) -> EvalError {
    move |message| EvalError::Stage { stage, message }
}

/// Corpus of the distinct passages of `pairs` (ids `p0`, `p1`, ... in first
/// appearance order) and one fixture per pair whose relevant id is its
/// passage.
pub fn pairs_to_fixtures(pairs: &[TrainingPair]) -> (Vec<Passage>, Vec<RetrievalFixture>) {
    let mut ids: BTreeMap<&str, String> = BTreeMap::new();
    let mut passages = Vec::new();
    let mut fixtures = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = ids
            .entry(p.passage.as_str())
            .or_insert_with(|| {
                let id = format!("p{}", passages.len());
                passages.push(Passage {
                    passage_id: id.clone(),
                    doc_id: id.clone(),
                    text: p.passage.clone(),
                    sentence_span: (0, 0),
                    corpus_variant: CorpusVariant::Raw,
                    answer: None,
                });
                id
            })
            .clone();
        fixtures.push(RetrievalFixture {
            query_id: format!("q{i}"),
            query: p.question.clone(),
            relevant_ids: vec![id],
        });
    }
    (passages, fixtures)
}

/// Retrieves the top `pool_size` per fixture and scores MRR and MAP over that
/// list; with a re-ranker, the same pool is re-ordered and scored again.
/// Keys: `retriever_mrr`, `retriever_map`, and `reranked_mrr`,
/// `reranked_map` when a re-ranker is given.
pub fn evaluate_retrieval(
    index: &EmbeddingIndex,
    encoder: &dyn TextEncoder,
    reranker: Option<&dyn PairScorer>,
    fixtures: &[RetrievalFixture],
    pool_size: usize,
) -> Result<EvalReport, EvalError> {
    if fixtures.is_empty() {
        return Err(EvalError::Empty("retrieval fixtures"));
    }
    if pool_size == 0 {
        return Err(EvalError::Stage {
            stage: "retrieve",
            message: "pool_size must be at least 1".into(),
        });
    }
    let judged: Vec<(RankingJudgment, Option<RankingJudgment>)> = fixtures
        .par_iter()
        .map(|f| {
            let hits = index.retrieve(&f.query, encoder, pool_size).map_err(|e| stage("retrieve")(e.to_string()))?;
            let relevant: BTreeSet<String> = f.relevant_ids.iter().cloned().collect();
            let ids = hits.iter().map(|h| h.passage.passage_id.clone()).collect();
            let base = RankingJudgment::new(f.query_id.clone(), ids, relevant.clone())?;
            let reranked = match reranker {
                None => None,
                Some(r) => {
                    let n = hits.len().max(1);
                    let out = rerank(&f.query, hits, r, n).map_err(|e| stage("rerank")(e.to_string()))?;
                    let ids = out.into_iter().map(|h| h.passage.passage_id).collect();
                    Some(RankingJudgment::new(f.query_id.clone(), ids, relevant)?)
                }
            };
            Ok((base, reranked))
        })
        .collect::<Result<_, EvalError>>()?;
    let (base, reranked): (Vec<_>, Vec<_>) = judged.into_iter().unzip();
    let mut metrics = BTreeMap::new();
    metrics.insert("retriever_mrr".to_string(), mrr(&base)?);
    metrics.insert("retriever_map".to_string(), mean_average_precision(&base)?);
    if reranker.is_some() {
        let rr: Vec<RankingJudgment> = reranked.into_iter().flatten().collect();
        metrics.insert("reranked_mrr".to_string(), mrr(&rr)?);
        metrics.insert("reranked_map".to_string(), mean_average_precision(&rr)?);
    }
    let protocol = Protocol::new("retrieval")
        .with("encoder", &encoder.spec().checkpoint_name)
        .with("reranker", reranker.map(|r| r.spec().checkpoint_name.clone()))
        .with("pool_size", pool_size)
        .with("index_size", index.len());
    EvalReport::new(protocol, fixtures.len(), metrics)
}

/// Generates an answer per record from its own contexts and reports the
/// mean `token_f1`, `bleu1`, `rouge1` and `rouge_l` against the reference.
pub fn evaluate_generation(
    generator: &dyn LanguageModel,
    records: &[QARecord],
    decoding: &DecodingConfig,
    layout: &PromptLayout,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("generation fixtures"));
    }
    let scores: Vec<[f64; 4]> = records
        .par_iter()
        .map(|r| {
            if r.answer.trim().is_empty() {
                return Err(EvalError::EmptyReference);
            }
            let resp = generate_response(generator, &r.question, &r.groundings(), decoding, layout)
                .map_err(|e| stage("generate")(e.to_string()))?;
            let p = resp.text.as_str();
            Ok([token_f1(p, &r.answer), bleu1(p, &r.answer), rouge1(p, &r.answer), rouge_l(p, &r.answer)])
        })
        .collect::<Result<_, EvalError>>()?;
    let n = scores.len() as f64;
    let mut metrics = BTreeMap::new();
    for (k, name) in ["token_f1", "bleu1", "rouge1", "rouge_l"].iter().enumerate() {
        metrics.insert(name.to_string(), scores.iter().map(|s| s[k]).sum::<f64>() / n);
    }
    let protocol = Protocol::new("generation")
        .with("generator", &generator.spec().checkpoint_name)
        .with("decoding", decoding)
        .with("max_input_tokens", layout.max_input_tokens);
    EvalReport::new(protocol, records.len(), metrics)
}

/// `macro_f1` and `accuracy` of `model` on labeled examples.
pub fn evaluate_intent(model: &dyn IntentModel, examples: &[LabeledQuery]) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty("intent examples"));
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let preds = texts
        .par_chunks(64)
        .map(|c| model.predict_batch(c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| stage("classify")(e.to_string()))?;
    let pred: Vec<usize> = preds.into_iter().flatten().map(|p| p.top_index).collect();
    let gold: Vec<usize> = examples.iter().map(|e| e.label_index).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("macro_f1".to_string(), macro_f1(&gold, &pred)?);
    metrics.insert("accuracy".to_string(), accuracy(&gold, &pred)?);
    let protocol = Protocol::new("intent").with("labels", model.labels().len());
    EvalReport::new(protocol, examples.len(), metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::{ScriptedLm, TableEncoder};
    use crate::retrieval::{build_index, Similarity};

    #[test]
    fn perfect_retriever_scores_one() {
        let pairs: Vec<TrainingPair> = ["a", "b", "c"]
            .iter()
            .map(|t| TrainingPair {
                question: t.to_string(),
                passage: t.to_string(),
            })
            .collect();
        let (passages, fixtures) = pairs_to_fixtures(&pairs);
        let enc = TableEncoder::one_hot(&["a", "b", "c"]);
        let index = build_index(passages, &enc, Similarity::Dot).unwrap();
        let r = evaluate_retrieval(&index, &enc, None, &fixtures, 10).unwrap();
        assert_eq!(r.get("retriever_mrr"), Some(1.0));
        assert_eq!(r.get("retriever_map"), Some(1.0));
        assert_eq!(r.get("reranked_mrr"), None);
        assert!(evaluate_retrieval(&index, &enc, None, &[], 10).is_err());
    }

    #[test]
    fn duplicate_passages_share_an_id() {
        let p = |q: &str, a: &str| TrainingPair {
            question: q.into(),
            passage: a.into(),
        };
        let (passages, fixtures) = pairs_to_fixtures(&[p("q1", "x"), p("q2", "x"), p("q3", "y")]);
        assert_eq!(passages.len(), 2);
        assert_eq!(fixtures[1].relevant_ids, ["p0"]);
    }

    fn record(q: &str, a: &str) -> QARecord {
        QARecord {
            question: q.into(),
            answer: a.into(),
            context_passages: vec![],
            well_formed: true,
        }
    }

    #[test]
    fn echo_and_empty_generators() {
        // The echo stub answers with the question text.
        let recs = [record("the sky is blue", "the sky is blue"), record("grass grows", "grass grows")];
        let echo = ScriptedLm::echo();
        let r = evaluate_generation(&echo, &recs, &DecodingConfig::default(), &PromptLayout::default()).unwrap();
        for m in ["token_f1", "bleu1", "rouge1", "rouge_l"] {
            assert_eq!(r.get(m), Some(1.0), "{m}");
        }
        let silent = ScriptedLm::fixed("");
        let r = evaluate_generation(&silent, &recs, &DecodingConfig::default(), &PromptLayout::default()).unwrap();
        for m in ["token_f1", "bleu1", "rouge1", "rouge_l"] {
            assert_eq!(r.get(m), Some(0.0), "{m}");
        }
    }
}
