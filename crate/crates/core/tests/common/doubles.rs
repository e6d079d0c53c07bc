//! Test doubles for pipeline stages: exact-confidence intent models and
//! call-counting wrappers.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::Tensor;
use naa_core::backends::stub::{HashEncoder, OverlapScorer, ScriptedLm};
use naa_core::backends::{
    EncodeMode, EncoderSpec, GenTokenizer, GeneratorSpec, LanguageModel, LmOutputs, LogitsSession, PairScorer,
    TextEncoder, TokenSeq,
};
use naa_core::intent::{GateModel, IntentLabelSet, IntentModel, IntentPrediction};
use naa_core::pipeline::{Components, STUB_POSITIVE_LABEL};
use naa_core::retrieval::{build_index, Passage, QAPair, Similarity};
use ndarray::Array2;

type BResult<T> = Result<T, naa_core::backends::BackendError>;

/// Intent model whose top confidence is exactly the configured value.
pub struct FixedIntent {
    labels: IntentLabelSet,
    confidence: f64,
    pub calls: Arc<AtomicUsize>,
}

impl FixedIntent {
    pub fn new(confidence: f64) -> Self {
        Self {
            labels: IntentLabelSet::new(vec!["faq".into(), "other".into()]).unwrap(),
            confidence,
            calls: Arc::default(),
        }
    }
}

impl IntentModel for FixedIntent {
    fn labels(&self) -> &IntentLabelSet {
        &self.labels
    }

    fn predict_batch(&self, texts: &[&str]) -> Result<Vec<IntentPrediction>, naa_core::intent::IntentError> {
        self.calls.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|_| IntentPrediction {
                probabilities: vec![self.confidence, 1.0 - self.confidence],
                top_label: "faq".into(),
                top_index: 0,
                confidence: self.confidence,
            })
            .collect())
    }

    fn save(&self, _: &Path) -> Result<(), naa_core::intent::IntentError> {
        Ok(())
    }
}

pub struct CountingEncoder {
    inner: Arc<dyn TextEncoder>,
    pub calls: Arc<AtomicUsize>,
}

impl TextEncoder for CountingEncoder {
    fn spec(&self) -> &EncoderSpec {
        self.inner.spec()
    }

    fn forward(&self, texts: &[&str], mode: EncodeMode) -> BResult<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(texts, mode)
    }

    fn encode(&self, texts: &[&str], mode: EncodeMode) -> BResult<Array2<f32>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.encode(texts, mode)
    }

    fn fork(&self) -> BResult<Arc<dyn TextEncoder>> {
        self.inner.fork()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    fn save(&self, dir: &Path) -> BResult<()> {
        self.inner.save(dir)
    }
}

pub struct CountingScorer {
    inner: Arc<dyn PairScorer>,
    pub calls: Arc<AtomicUsize>,
}

impl PairScorer for CountingScorer {
    fn spec(&self) -> &EncoderSpec {
        self.inner.spec()
    }

    fn forward(&self, pairs: &[(&str, &str)]) -> BResult<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(pairs)
    }

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> BResult<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_pairs(pairs)
    }

    fn fork(&self) -> BResult<Arc<dyn PairScorer>> {
        self.inner.fork()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    fn save(&self, dir: &Path) -> BResult<()> {
        self.inner.save(dir)
    }
}

pub struct CountingLm {
    inner: Arc<dyn LanguageModel>,
    pub calls: Arc<AtomicUsize>,
}

impl LanguageModel for CountingLm {
    fn spec(&self) -> &GeneratorSpec {
        self.inner.spec()
    }

    fn tokenizer(&self) -> &GenTokenizer {
        self.inner.tokenizer()
    }

    fn session(&self) -> Box<dyn LogitsSession + '_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.session()
    }

    fn forward_train(&self, seqs: &[TokenSeq], mc_positions: Option<&[usize]>) -> BResult<LmOutputs> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.forward_train(seqs, mc_positions)
    }

    fn fork(&self) -> BResult<Arc<dyn LanguageModel>> {
        self.inner.fork()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    fn save(&self, dir: &Path) -> BResult<()> {
        self.inner.save(dir)
    }
}

#[derive(Default, Clone)]
pub struct Calls {
    pub intent: Arc<AtomicUsize>,
    pub encoder: Arc<AtomicUsize>,
    pub scorer: Arc<AtomicUsize>,
    pub generator: Arc<AtomicUsize>,
    pub chitchat: Arc<AtomicUsize>,
}

impl Calls {
    pub fn get(c: &Arc<AtomicUsize>) -> usize {
        c.load(Ordering::SeqCst)
    }
}

pub fn kb_passages() -> Vec<Passage> {
    [
        ("1", "how do I reset my card pin", "Use the mobile app under card settings."),
        ("2", "what is the wire transfer fee", "Wires cost 25 dollars."),
        ("3", "how do I open a savings account", "Apply online in ten minutes."),
        ("4", "can I raise my credit limit", "Request an increase after six months."),
        ("5", "how do I dispute a charge", "Open the transaction and tap dispute."),
    ]
    .iter()
    .map(|(id, q, a)| {
        Passage::from_qa(&QAPair {
            pair_id: id.to_string(),
            question: q.to_string(),
            answer: a.to_string(),
        })
    })
    .collect()
}

/// Stage models with fixed gate and intent confidences; every downstream
/// model counts its calls.
pub fn counted_components(gate: f64, intent: f64) -> (Components, Calls) {
    let calls = Calls::default();
    let enc: Arc<dyn TextEncoder> = Arc::new(HashEncoder::new(64));
    let index = build_index(kb_passages(), enc.as_ref(), Similarity::Dot).unwrap();
    let mut fixed = FixedIntent::new(intent);
    fixed.calls = calls.intent.clone();
    let c = Components {
        gate: Some(GateModel::scripted(STUB_POSITIVE_LABEL, gate).unwrap()),
        intent: Some(Arc::new(fixed)),
        retriever: Some(Arc::new(CountingEncoder {
            inner: enc,
            calls: calls.encoder.clone(),
        })),
        index: Some(Arc::new(index)),
        reranker: Some(Arc::new(CountingScorer {
            inner: Arc::new(OverlapScorer::default()),
            calls: calls.scorer.clone(),
        })),
        generator: Some(Arc::new(CountingLm {
            inner: Arc::new(ScriptedLm::fixed("Here is what I found.")),
            calls: calls.generator.clone(),
        })),
        chitchat: Some(Arc::new(CountingLm {
            inner: Arc::new(ScriptedLm::fixed("Happy to chat!")),
            calls: calls.chitchat.clone(),
        })),
        ..Components::default()
    };
    (c, calls)
}

/// The grid probed by routing tests: both boundaries and a hair above.
pub fn confidence_grid() -> [f64; 6] {
    [0.0, 0.25, 0.5, 0.5 + 1e-9, 0.75, 1.0]
}
