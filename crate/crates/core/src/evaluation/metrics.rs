//! Ranking and text-overlap metrics. All text metrics share one
//! normalisation: lowercase, drop every character that is neither
//! alphanumeric nor whitespace, split on whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One query's ranked output and its gold ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingJudgment {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub relevant_ids: BTreeSet<String>,
}

impl RankingJudgment {
    pub fn new(
        query_id: impl Into<String>,
        ranked_ids: Vec<String>,
        relevant_ids: impl IntoIterator<Item = String>,
    ) -> Result<Self, EvalError> {
        let j = Self {
            query_id: query_id.into(),
            ranked_ids,
            relevant_ids: relevant_ids.into_iter().collect(),
        };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.relevant_ids.is_empty() {
            return Err(EvalError::NoRelevant(self.query_id.clone()));
        }
        let distinct: BTreeSet<&String> = self.ranked_ids.iter().collect();
        if distinct.len() != self.ranked_ids.len() {
            return Err(EvalError::DuplicateRankedId(self.query_id.clone()));
        }
        Ok(())
    }

    /// 1-based rank of the first relevant id.
    pub fn first_relevant_rank(&self) -> Option<usize> {
        self.ranked_ids
            .iter()
            .position(|id| self.relevant_ids.contains(id))
            .map(|p| p + 1)
    }

    pub fn reciprocal_rank(&self) -> f64 {
        self.first_relevant_rank().map_or(0.0, |r| 1.0 / r as f64)
    }

    pub fn average_precision(&self) -> f64 {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (k, id) in self.ranked_ids.iter().enumerate() {
            if self.relevant_ids.contains(id) {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        sum / self.relevant_ids.len() as f64
    }
}

fn checked(judgments: &[RankingJudgment]) -> Result<(), EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::Empty("judgments"));
    }
    judgments.iter().try_for_each(RankingJudgment::validate)
}

/// Mean reciprocal rank of the first relevant id; queries without one add 0.
pub fn mrr(judgments: &[RankingJudgment]) -> Result<f64, EvalError> {
    checked(judgments)?;
    Ok(judgments.iter().map(RankingJudgment::reciprocal_rank).sum::<f64>() / judgments.len() as f64)
}

/// Mean over queries of `Σ_k P@k·rel(k) / |relevant|`.
pub fn mean_average_precision(judgments: &[RankingJudgment]) -> Result<f64, EvalError> {
    checked(judgments)?;
    Ok(judgments.iter().map(RankingJudgment::average_precision).sum::<f64>() / judgments.len() as f64)
}

/// A generated text and its single reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub prediction: String,
    pub reference: String,
}

impl TextPair {
    pub fn new(prediction: impl Into<String>, reference: impl Into<String>) -> Result<Self, EvalError> {
        let reference = reference.into();
        if reference.trim().is_empty() {
            return Err(EvalError::EmptyReference);
        }
        Ok(Self {
            prediction: prediction.into(),
            reference,
        })
    }

    pub fn token_f1(&self) -> f64 {
        token_f1(&self.prediction, &self.reference)
    }

    pub fn bleu1(&self) -> f64 {
        bleu1(&self.prediction, &self.reference)
    }

    pub fn rouge1(&self) -> f64 {
        rouge1(&self.prediction, &self.reference)
    }

    pub fn rouge_l(&self) -> f64 {
        rouge_l(&self.prediction, &self.reference)
    }
}

pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Size of the multiset intersection.
fn overlap(a: &[String], b: &[String]) -> usize {
    let cb = counts(b);
    counts(a)
        .iter()
        .map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(matched: usize, pred_len: usize, ref_len: usize) -> f64 {
    if matched == 0 || pred_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = matched as f64 / pred_len as f64;
    let r = matched as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let r = normalize_tokens(reference);
    f_measure(overlap(&p, &r), p.len(), r.len())
}

/// Clipped unigram precision times the brevity penalty `min(1, exp(1 − r/c))`.
pub fn bleu1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let r = normalize_tokens(reference);
    if p.is_empty() {
        return 0.0;
    }
    let c = p.len() as f64;
    let precision = overlap(&p, &r) as f64 / c;
    let bp = (1.0 - r.len() as f64 / c).exp().min(1.0);
    precision * bp
}

pub fn rouge1(prediction: &str, reference: &str) -> f64 {
    token_f1(prediction, reference)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β = 1.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let r = normalize_tokens(reference);
    f_measure(lcs_len(&p, &r), p.len(), r.len())
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(gold: &[usize], pred: &[usize]) -> Result<f64, EvalError> {
    check_labels(gold, pred)?;
    Ok(gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over every class that occurs in `gold`
/// or `pred`.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> Result<f64, EvalError> {
    check_labels(gold, pred)?;
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            counts.entry(g).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    let sum: f64 = counts
        .values()
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .sum();
    Ok(sum / counts.len() as f64)
}

fn check_labels(gold: &[usize], pred: &[usize]) -> Result<(), EvalError> {
    if gold.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    if gold.len() != pred.len() {
        return Err(EvalError::Stage {
            stage: "classification",
            message: format!("{} gold labels but {} predictions", gold.len(), pred.len()),
        });
    }
    Ok(())
}
