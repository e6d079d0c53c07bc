//! MSMARCO QA records to [`QARecord`]s.
//!
//! Accepts both the row-oriented dump (`passages` as a list of objects,
//! `wellFormedAnswers` possibly the string `"[]"`) and the columnar export
//! (`passages` as an object of parallel lists).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::QARecord;

const NO_ANSWER: &str = "No Answer Present.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsmarcoSkip {
    NoAnswer,
    MultipleAnswers,
    Malformed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsmarcoStats {
    pub kept: usize,
    pub well_formed: usize,
    pub no_answer: usize,
    pub multiple_answers: usize,
    pub malformed: usize,
}

impl MsmarcoStats {
    fn count(&mut self, r: &Result<QARecord, MsmarcoSkip>) {
        match r {
            Ok(q) => {
                self.kept += 1;
                self.well_formed += usize::from(q.well_formed);
            }
            Err(MsmarcoSkip::NoAnswer) => self.no_answer += 1,
            Err(MsmarcoSkip::MultipleAnswers) => self.multiple_answers += 1,
            Err(MsmarcoSkip::Malformed) => self.malformed += 1,
        }
    }
}

fn answers(v: Option<&Value>) -> Result<Vec<String>, MsmarcoSkip> {
    let list = match v {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::String(s)) if s.trim() == "[]" => return Ok(Vec::new()),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| x.as_str().map(str::to_string).ok_or(MsmarcoSkip::Malformed))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(MsmarcoSkip::Malformed),
    };
    Ok(list
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && s != NO_ANSWER)
        .collect())
}

fn selected(v: &Value) -> bool {
    v.as_i64().map(|i| i != 0).or_else(|| v.as_bool()).unwrap_or(false)
}

/// `(text, is_selected)` per passage.
fn passages(v: Option<&Value>) -> Result<Vec<(String, bool)>, MsmarcoSkip> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|p| {
                let text = p.get("passage_text").and_then(Value::as_str).ok_or(MsmarcoSkip::Malformed)?;
                Ok((text.to_string(), p.get("is_selected").is_some_and(selected)))
            })
            .collect(),
        Some(Value::Object(cols)) => {
            let texts = cols
                .get("passage_text")
                .and_then(Value::as_array)
                .ok_or(MsmarcoSkip::Malformed)?;
            let sel = cols.get("is_selected").and_then(Value::as_array);
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let t = t.as_str().ok_or(MsmarcoSkip::Malformed)?;
                    let s = sel.and_then(|s| s.get(i)).is_some_and(selected);
                    Ok((t.to_string(), s))
                })
                .collect()
        }
        Some(_) => Err(MsmarcoSkip::Malformed),
    }
}

/// Uses the first well-formed answer when there is one, else the single
/// plain answer; records with several plain answers and no well-formed one
/// are skipped. Contexts are the selected passages, or all passages when
/// none is marked.
pub fn preprocess_msmarco(record: &Value) -> Result<QARecord, MsmarcoSkip> {
    let question = record
        .get("query")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|q| !q.is_empty())
        .ok_or(MsmarcoSkip::Malformed)?;
    let well_formed = answers(record.get("wellFormedAnswers"))?;
    let plain = answers(record.get("answers"))?;
    let ps = passages(record.get("passages"))?;
    let (answer, is_wf) = match (well_formed.first(), plain.as_slice()) {
        (Some(w), _) => (w.clone(), true),
        (None, [one]) => (one.clone(), false),
        (None, []) => return Err(MsmarcoSkip::NoAnswer),
        (None, _) => return Err(MsmarcoSkip::MultipleAnswers),
    };
    let any_selected = ps.iter().any(|(_, s)| *s);
    let context_passages = ps
        .into_iter()
        .filter(|(_, s)| *s || !any_selected)
        .map(|(t, _)| t)
        .collect();
    Ok(QARecord {
        question: question.to_string(),
        answer,
        context_passages,
        well_formed: is_wf,
    })
}

/// Processes JSON lines; unparseable lines count as malformed.
pub fn preprocess_msmarco_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> (Vec<QARecord>, MsmarcoStats) {
    let mut stats = MsmarcoStats::default();
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str::<Value>(line)
            .map_err(|_| MsmarcoSkip::Malformed)
            .and_then(|v| preprocess_msmarco(&v));
        stats.count(&r);
        if let Ok(q) = r {
            out.push(q);
        }
    }
    (out, stats)
}
