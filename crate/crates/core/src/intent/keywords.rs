//! Embed-and-rank keyword extraction for queries the intent model is unsure
//! about.

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{IntentError, Result};
use crate::backends::{EncodeMode, TextEncoder};
use crate::util::word_tokens;

/// Fixed English stopword list. N-grams never span a stopword.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "aren", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "cannot", "could",
    "couldn", "did", "didn", "do", "does", "doesn", "doing", "don", "down", "during", "each", "few", "for", "from",
    "further", "had", "hadn", "has", "hasn", "have", "haven", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "isn", "it", "its", "itself", "just", "ll",
    "me", "might", "more", "most", "must", "mustn", "my", "myself", "no", "nor", "not", "now", "of", "off", "on",
    "once", "only", "or", "other", "ought", "our", "ours", "ourselves", "out", "over", "own", "re", "s", "same",
    "shan", "she", "should", "shouldn", "so", "some", "such", "t", "than", "that", "the", "their", "theirs",
    "them", "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too", "under",
    "until", "up", "ve", "very", "was", "wasn", "we", "were", "weren", "what", "when", "where", "which", "while",
    "who", "whom", "why", "will", "with", "won", "would", "wouldn", "you", "your", "yours", "yourself",
    "yourselves",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeywordConfig {
    pub top_m: usize,
    pub ngram_range: (usize, usize),
    /// Maximal marginal relevance re-selection.
    pub use_mmr: bool,
    pub diversity: f64,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        Self {
            top_m: 5,
            ngram_range: (1, 2),
            use_mmr: false,
            diversity: 0.5,
        }
    }
}

fn is_stopword(w: &str) -> bool {
    STOPWORDS.binary_search(&w).is_ok()
}

/// Distinct n-grams (lo..=hi words) inside stopword-free runs, lowercased.
fn candidates(query: &str, lo: usize, hi: usize) -> Vec<String> {
    let tokens = word_tokens(query);
    let mut out = BTreeSet::new();
    for run in tokens.split(|w| is_stopword(w)) {
        for n in lo..=hi.min(run.len()) {
            for g in run.windows(n) {
                out.insert(g.join(" "));
            }
        }
    }
    out.into_iter().collect()
}

fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f32 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Top `m` n-grams by cosine similarity to the whole query, descending,
/// ties broken lexicographically. Only stopwords → empty list.
pub fn extract_ood_keywords(
    query: &str,
    encoder: &dyn TextEncoder,
    m: usize,
    ngram_range: (usize, usize),
) -> Result<Vec<(String, f32)>> {
    extract_ood_keywords_with(
        query,
        encoder,
        &KeywordConfig {
            top_m: m,
            ngram_range,
            ..KeywordConfig::default()
        },
    )
}

/// As [`extract_ood_keywords`]; with `use_mmr` the list is in selection
/// order instead.
pub fn extract_ood_keywords_with(query: &str, encoder: &dyn TextEncoder, cfg: &KeywordConfig) -> Result<Vec<(String, f32)>> {
    let (lo, hi) = cfg.ngram_range;
    if cfg.top_m == 0 || lo == 0 || lo > hi {
        return Err(IntentError::Config(format!(
            "need m ≥ 1 and 1 ≤ lo ≤ hi, got m={} range=({lo}, {hi})",
            cfg.top_m
        )));
    }
    let cands = candidates(query, lo, hi);
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts: Vec<&str> = vec![query];
    texts.extend(cands.iter().map(String::as_str));
    let emb = encoder.encode(&texts, EncodeMode::Query)?;
    let doc = emb.row(0);
    let scores: Vec<f32> = (1..emb.nrows()).map(|i| cosine(emb.row(i), doc)).collect();
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| cands[a].cmp(&cands[b])));
    let m = cfg.top_m.min(cands.len());
    let picked = if cfg.use_mmr {
        mmr(&emb.slice(ndarray::s![1.., ..]).to_owned(), &scores, &order, m, cfg.diversity)
    } else {
        order[..m].to_vec()
    };
    Ok(picked.into_iter().map(|i| (cands[i].clone(), scores[i])).collect())
}

fn mmr(cand: &ndarray::Array2<f32>, relevance: &[f32], order: &[usize], m: usize, diversity: f64) -> Vec<usize> {
    let mut picked = vec![order[0]];
    let mut max_sim: Array1<f32> = Array1::from_iter((0..cand.nrows()).map(|i| cosine(cand.row(i), cand.row(order[0]))));
    while picked.len() < m {
        let lambda = diversity as f32;
        let mut next = None;
        let mut best = f32::NEG_INFINITY;
        // Strict comparison: earlier in `order` wins ties.
        for &i in order.iter().filter(|i| !picked.contains(i)) {
            let s = (1.0 - lambda) * relevance[i] - lambda * max_sim[i];
            if next.is_none() || s > best {
                next = Some(i);
                best = s;
            }
        }
        let next = next.expect("m ≤ candidate count");
        for i in 0..cand.nrows() {
            max_sim[i] = max_sim[i].max(cosine(cand.row(i), cand.row(next)));
        }
        picked.push(next);
    }
    picked
}
