use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    classify_intent, load_intent_model, train_intent_classifier, IntentError, IntentLabelSet, IntentModel,
    IntentTrainConfig, LabeledQuery, Result, ScriptedIntent, TrainReport,
};
use crate::backends::{ModelRegistry, TextEncoder};

/// Label of the negative gate class.
pub const GENERAL_LABEL: &str = "general";
const GATE_FILE: &str = "gate.json";

/// Two-class model deciding whether a query belongs to the assistant's domain.
#[derive(Clone)]
pub struct GateModel {
    model: Arc<dyn IntentModel>,
    positive_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub in_domain: bool,
    /// Positive-class probability.
    pub confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct GateFile {
    positive_label: String,
}

impl GateModel {
    pub fn new(model: Arc<dyn IntentModel>, positive_label: &str) -> Result<Self> {
        if model.labels().len() != 2 {
            return Err(IntentError::Labels(format!(
                "a gate needs exactly two classes, got {}",
                model.labels().len()
            )));
        }
        let positive_index = model
            .labels()
            .index_of(positive_label)
            .ok_or_else(|| IntentError::UnknownLabel(positive_label.to_string()))?;
        Ok(Self { model, positive_index })
    }

    /// Gate answering `confidence` for every query.
    pub fn scripted(positive_label: &str, confidence: f64) -> Result<Self> {
        let labels = IntentLabelSet::new(vec![GENERAL_LABEL.to_string(), positive_label.to_string()])?;
        let s = ScriptedIntent::new(labels, positive_label, confidence)?;
        Self::new(Arc::new(s), positive_label)
    }

    pub fn positive_label(&self) -> &str {
        self.model.labels().name(self.positive_index).expect("validated")
    }

    pub fn model(&self) -> &Arc<dyn IntentModel> {
        &self.model
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let f = GateFile {
            positive_label: self.positive_label().to_string(),
        };
        std::fs::write(dir.join(GATE_FILE), serde_json::to_vec_pretty(&f).expect("gate serialises"))?;
        Ok(())
    }
}

pub fn load_gate(dir: &Path, registry: &ModelRegistry) -> Result<GateModel> {
    let model = load_intent_model(dir, registry)?;
    let f: GateFile = serde_json::from_slice(&std::fs::read(dir.join(GATE_FILE))?)
        .map_err(|e| IntentError::Format(format!("{GATE_FILE}: {e}")))?;
    GateModel::new(model, &f.positive_label)
}

/// In domain iff the positive-class probability is strictly above `threshold`.
pub fn gate_query(query: &str, gate: &GateModel, threshold: f64) -> Result<GateDecision> {
    let p = classify_intent(query, gate.model.as_ref())?;
    let confidence = p.probability_of(gate.positive_index);
    Ok(GateDecision {
        in_domain: confidence > threshold,
        confidence,
    })
}

/// Trains a `[general, positive_label]` classifier. The report's validation
/// figures are on the held-out split.
pub fn train_domain_gate(
    positive: &[String],
    negative: &[String],
    positive_label: &str,
    encoder: &dyn TextEncoder,
    cfg: &IntentTrainConfig,
) -> Result<(GateModel, TrainReport)> {
    if positive.is_empty() || negative.is_empty() {
        let which = if positive.is_empty() { "positive" } else { "negative" };
        return Err(IntentError::EmptyTrainingSet(format!(" in the {which} set")));
    }
    let labels = IntentLabelSet::new(vec![GENERAL_LABEL.to_string(), positive_label.to_string()])?;
    let mut examples = Vec::with_capacity(positive.len() + negative.len());
    for t in negative {
        examples.push(LabeledQuery::new(t, 0)?);
    }
    for t in positive {
        examples.push(LabeledQuery::new(t, 1)?);
    }
    let (clf, report) = train_intent_classifier(&examples, labels, encoder, cfg)?;
    Ok((GateModel::new(Arc::new(clf), positive_label)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_threshold_on_a_grid() {
        for i in 0..=20 {
            let c = i as f64 / 20.0;
            let gate = GateModel::scripted("banking", c).unwrap();
            for t in [0.25, 0.5, 0.75, c] {
                let d = gate_query("anything", &gate, t).unwrap();
                assert_eq!(d.confidence, c);
                assert_eq!(d.in_domain, c > t, "confidence {c}, threshold {t}");
            }
        }
        let g = GateModel::scripted("banking", 0.9).unwrap();
        assert_eq!(
            gate_query("q", &g, 0.5).unwrap(),
            GateDecision {
                in_domain: true,
                confidence: 0.9
            }
        );
        assert!(gate_query(" ", &g, 0.5).is_err());
    }

    #[test]
    fn empty_class_is_an_error() {
        let enc = crate::backends::stub::encoder("stub:hash").unwrap();
        let r = train_domain_gate(&["x".into()], &[], "banking", enc.as_ref(), &IntentTrainConfig::default());
        assert!(matches!(r, Err(IntentError::EmptyTrainingSet(_))));
    }

    #[test]
    fn gate_round_trip() {
        let g = GateModel::scripted("banking", 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let back = load_gate(dir.path(), &ModelRegistry::new(None)).unwrap();
        assert_eq!(back.positive_label(), "banking");
        assert_eq!(gate_query("q", &back, 0.5).unwrap().confidence, 0.7);
    }
}
