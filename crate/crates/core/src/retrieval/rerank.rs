use serde::{Deserialize, Serialize};

use super::{Passage, Result, RetrievalError};
use crate::backends::PairScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub passage: Passage,
    pub retriever_score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker_score: Option<f32>,
    /// 1-based.
    pub rank: usize,
}

/// Scores every candidate with the cross-encoder and keeps the best `top_n`,
/// ordered by re-ranker score (earlier retriever rank breaks ties).
pub fn rerank(
    query: &str,
    candidates: Vec<RankedContext>,
    scorer: &dyn PairScorer,
    top_n: usize,
) -> Result<Vec<RankedContext>> {
    if top_n == 0 {
        return Err(RetrievalError::Config("top_n must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let pairs: Vec<(&str, &str)> = candidates.iter().map(|c| (query, c.passage.text.as_str())).collect();
    let scores = scorer.score_pairs(&pairs)?;
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(RetrievalError::Format(format!("re-ranker produced non-finite score {bad}")));
    }
    let mut scored: Vec<(f32, RankedContext)> = scores.into_iter().zip(candidates).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.rank.cmp(&b.1.rank)));
    Ok(scored
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (s, mut c))| {
            c.reranker_score = Some(s);
            c.rank = i + 1;
            c
        })
        .collect())
}
