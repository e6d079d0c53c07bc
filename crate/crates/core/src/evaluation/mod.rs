//! Ranking and generation metrics, evaluation harnesses, and ingestion of
//! manual 0 to 100 quality scores.

mod harness;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use harness::{evaluate_generation, evaluate_intent, evaluate_retrieval, pairs_to_fixtures, RetrievalFixture};
pub use metrics::{
    accuracy, bleu1, macro_f1, mean_average_precision, mrr, normalize_tokens, rouge1, rouge_l, token_f1, RankingJudgment,
    TextPair,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no {0} to evaluate")]
    Empty(&'static str),
    #[error("query `{0}` has no relevant ids")]
    NoRelevant(String),
    #[error("query `{0}` ranks the same id twice")]
    DuplicateRankedId(String),
    #[error("reference text is empty")]
    EmptyReference,
    #[error("metric `{name}` = {value} lies outside [0, 1]")]
    OutOfRange { name: String, value: f64 },
    #[error("no valid rows in {path}; {rejected} rejected")]
    NoValidScores { path: String, rejected: usize },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What was evaluated and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl Protocol {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.params.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub protocol: Protocol,
    pub timestamp: DateTime<Utc>,
}

impl EvalReport {
    pub fn new(protocol: Protocol, sample_count: usize, metrics: BTreeMap<String, f64>) -> Result<Self, EvalError> {
        if sample_count == 0 {
            return Err(EvalError::Empty("samples"));
        }
        if let Some((name, value)) = metrics.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(EvalError::OutOfRange {
                name: name.clone(),
                value: *value,
            });
        }
        Ok(Self {
            metrics,
            sample_count,
            protocol,
            timestamp: Utc::now(),
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// One row of a manual scoring sheet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualScore {
    pub item_id: String,
    pub score: u8,
    pub rater_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based data row, header excluded.
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualScoreSummary {
    /// Mean of every accepted score.
    pub mean: f64,
    /// Mean across raters, per item.
    pub per_item: BTreeMap<String, f64>,
    pub scores: Vec<ManualScore>,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Deserialize)]
struct RawScore {
    item_id: String,
    score: String,
    rater_id: String,
}

/// Reads a CSV with header `item_id,score,rater_id`. Rows with a score outside
/// 0..=100 or not an integer are rejected and reported; the rest are averaged.
pub fn ingest_manual_scores(path: &Path) -> Result<ManualScoreSummary, EvalError> {
    let csv_err = |source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let mut scores = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in reader.deserialize::<RawScore>().enumerate() {
        let row_no = i + 1;
        let raw = match row {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRow {
                    row: row_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match raw.score.parse::<i64>() {
            Ok(s) if (0..=100).contains(&s) => scores.push(ManualScore {
                item_id: raw.item_id,
                score: s as u8,
                rater_id: raw.rater_id,
            }),
            Ok(s) => rejected.push(RejectedRow {
                row: row_no,
                reason: format!("score {s} outside 0..=100"),
            }),
            Err(_) => rejected.push(RejectedRow {
                row: row_no,
                reason: format!("score `{}` is not an integer", raw.score),
            }),
        }
    }
    if scores.is_empty() {
        return Err(EvalError::NoValidScores {
            path: path.display().to_string(),
            rejected: rejected.len(),
        });
    }
    let mean = scores.iter().map(|s| f64::from(s.score)).sum::<f64>() / scores.len() as f64;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in &scores {
        let e = sums.entry(s.item_id.clone()).or_default();
        e.0 += f64::from(s.score);
        e.1 += 1;
    }
    let per_item = sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();
    Ok(ManualScoreSummary {
        mean,
        per_item,
        scores,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sheet(body: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), format!("item_id,score,rater_id\n{body}")).unwrap();
        f
    }

    #[test]
    fn single_score_mean() {
        let f = sheet("a,74,r1\n");
        let s = ingest_manual_scores(f.path()).unwrap();
        assert_eq!(s.mean, 74.0);
        assert_eq!(s.per_item["a"], 74.0);
    }

    #[test]
    fn out_of_range_rows_are_rejected() {
        let f = sheet("a,101,r1\nb,50,r1\nc,-1,r2\nd,x,r2\n");
        let s = ingest_manual_scores(f.path()).unwrap();
        assert_eq!(s.mean, 50.0);
        assert_eq!(s.rejected.iter().map(|r| r.row).collect::<Vec<_>>(), [1, 3, 4]);
        let f = sheet("a,101,r1\n");
        assert!(matches!(
            ingest_manual_scores(f.path()),
            Err(EvalError::NoValidScores { rejected: 1, .. })
        ));
    }

    #[test]
    fn per_item_averages_raters() {
        let f = sheet("a,60,r1\na,80,r2\nb,100,r1\n");
        let s = ingest_manual_scores(f.path()).unwrap();
        assert_eq!(s.per_item["a"], 70.0);
        assert!((s.mean - 80.0).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_out_of_range_and_empty() {
        let mut m = BTreeMap::new();
        m.insert("mrr".to_string(), 1.2);
        assert!(EvalReport::new(Protocol::new("x"), 1, m.clone()).is_err());
        m.insert("mrr".to_string(), 0.5);
        assert!(EvalReport::new(Protocol::new("x"), 0, m.clone()).is_err());
        let r = EvalReport::new(Protocol::new("x").with("k", 10), 3, m).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
