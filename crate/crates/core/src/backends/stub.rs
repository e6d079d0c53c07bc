//! Deterministic backends selected by the `stub:` checkpoint prefix.
//!
//! | checkpoint            | kind          | behaviour                                   |
//! |-----------------------|---------------|---------------------------------------------|
//! | `stub:hash[-D]`       | encoder       | signed word hashing into D dims (64), L2-normalised |
//! | `stub:bert-tiny`      | encoder       | seeded 2-layer BERT, hidden 32, trainable   |
//! | `stub:bert-mini`      | encoder       | seeded 2-layer BERT, hidden 64, trainable   |
//! | `stub:overlap`        | pair scorer   | fraction of query words found in the passage |
//! | `stub:cross-tiny`     | pair scorer   | seeded 2-layer BERT classifier, trainable   |
//! | `stub:script[:TEXT]`  | generator     | always emits TEXT, then end-of-sequence     |
//! | `stub:echo`           | generator     | emits the question segment of the prompt    |
//! | `stub:gpt2-tiny`      | generator     | seeded 2-layer GPT-2 over bytes, trainable  |
//! | `stub:identity`       | translator    | returns its input                           |

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};

use super::nn::{device, BertConfig, Gpt2Config, NeuralCrossEncoder, NeuralEncoder, NeuralLm};
use super::tokenize::{EncoderTokenizer, GenTokenizer};
use super::{
    save_stub_manifest, BackendError, EncodeMode, EncoderSpec, GeneratorSpec, LanguageModel, LmOutputs,
    LogitsSession, PairScorer, Pooling, Result, TextEncoder, TokenSeq, Translator,
};
use crate::util::{fnv1a, mix, word_tokens};

pub const PREFIX: &str = "stub:";

const HASH_BUCKETS: u32 = 4096;
const DEFAULT_SCRIPT: &str = "Thank you for your question.";

/// Bag-of-words encoder with signed feature hashing.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    spec: EncoderSpec,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            spec: EncoderSpec {
                checkpoint_name: format!("stub:hash-{dim}"),
                embedding_dim: dim,
                max_tokens: 512,
                pooling: Pooling::Mean,
            },
        }
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let d = self.spec.embedding_dim;
        let mut v = vec![0f32; d];
        for w in word_tokens(text).iter().take(self.spec.max_tokens) {
            let h = fnv1a(w.as_bytes());
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % d as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl TextEncoder for HashEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, texts: &[&str], _mode: EncodeMode) -> Result<Tensor> {
        let d = self.spec.embedding_dim;
        let rows: Vec<f32> = texts.iter().flat_map(|t| self.embed(t)).collect();
        Ok(Tensor::from_vec(rows, (texts.len(), d), &device())?)
    }

    fn fork(&self) -> Result<Arc<dyn TextEncoder>> {
        Ok(Arc::new(self.clone()))
    }

    fn checksum(&self) -> u64 {
        fnv1a(self.spec.checkpoint_name.as_bytes())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        save_stub_manifest(dir, "encoder", &self.spec.checkpoint_name)
    }
}

/// Encoder returning fixed vectors for known texts, for exact fixtures.
/// Unknown texts map to the zero vector.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    spec: EncoderSpec,
    table: HashMap<String, Vec<f32>>,
}

impl TableEncoder {
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let table: HashMap<String, Vec<f32>> = entries.into_iter().collect();
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(BackendError::InvalidConfig(format!(
                "vector for `{k}` has {} dims, expected {dim}",
                v.len()
            )));
        }
        Ok(Self {
            spec: EncoderSpec {
                checkpoint_name: "stub:table".into(),
                embedding_dim: dim,
                max_tokens: 512,
                pooling: Pooling::Mean,
            },
            table,
        })
    }

    /// Maps `texts[j]` to the standard basis vector `e_j`.
    pub fn one_hot(texts: &[&str]) -> Self {
        let n = texts.len();
        let entries = texts.iter().enumerate().map(|(j, t)| {
            let mut v = vec![0.0; n];
            v[j] = 1.0;
            (t.to_string(), v)
        });
        Self::new(n.max(1), entries).expect("dimensions match by construction")
    }
}

impl TextEncoder for TableEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, texts: &[&str], _mode: EncodeMode) -> Result<Tensor> {
        let d = self.spec.embedding_dim;
        let zero = vec![0f32; d];
        let rows: Vec<f32> = texts
            .iter()
            .flat_map(|t| self.table.get(*t).unwrap_or(&zero).iter().copied())
            .collect();
        Ok(Tensor::from_vec(rows, (texts.len(), d), &device())?)
    }

    fn fork(&self) -> Result<Arc<dyn TextEncoder>> {
        Ok(Arc::new(self.clone()))
    }

    fn checksum(&self) -> u64 {
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort();
        keys.iter().fold(0, |h, k| {
            let h = mix(h, fnv1a(k.as_bytes()));
            self.table[*k].iter().fold(h, |h, v| mix(h, u64::from(v.to_bits())))
        })
    }

    fn save(&self, _dir: &Path) -> Result<()> {
        Err(BackendError::InvalidConfig("table encoders are test fixtures and cannot be saved".into()))
    }
}

/// Relevance as the fraction of distinct query words present in the passage.
#[derive(Debug, Clone)]
pub struct OverlapScorer {
    spec: EncoderSpec,
}

impl Default for OverlapScorer {
    fn default() -> Self {
        Self {
            spec: EncoderSpec {
                checkpoint_name: "stub:overlap".into(),
                embedding_dim: 1,
                max_tokens: 512,
                pooling: Pooling::FirstToken,
            },
        }
    }
}

impl OverlapScorer {
    pub fn score(query: &str, passage: &str) -> f32 {
        let q: BTreeSet<String> = word_tokens(query).into_iter().collect();
        if q.is_empty() {
            return 0.0;
        }
        let p: BTreeSet<String> = word_tokens(passage).into_iter().collect();
        q.intersection(&p).count() as f32 / q.len() as f32
    }
}

impl PairScorer for OverlapScorer {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, pairs: &[(&str, &str)]) -> Result<Tensor> {
        let scores: Vec<f32> = pairs.iter().map(|(q, p)| Self::score(q, p)).collect();
        Ok(Tensor::from_vec(scores, pairs.len(), &device())?)
    }

    fn fork(&self) -> Result<Arc<dyn PairScorer>> {
        Ok(Arc::new(self.clone()))
    }

    fn checksum(&self) -> u64 {
        fnv1a(self.spec.checkpoint_name.as_bytes())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        save_stub_manifest(dir, "cross-encoder", &self.spec.checkpoint_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Script {
    Fixed(String),
    EchoQuestion,
}

/// Generator that follows a script regardless of sampling settings: at each
/// step exactly one logit is finite.
#[derive(Clone)]
pub struct ScriptedLm {
    spec: GeneratorSpec,
    tokenizer: Arc<GenTokenizer>,
    script: Script,
}

impl ScriptedLm {
    pub fn fixed(text: &str) -> Self {
        Self::with_script(format!("stub:script:{text}"), Script::Fixed(text.to_string()))
    }

    pub fn echo() -> Self {
        Self::with_script("stub:echo".into(), Script::EchoQuestion)
    }

    fn with_script(name: String, script: Script) -> Self {
        let tokenizer = GenTokenizer::bytes();
        Self {
            spec: GeneratorSpec {
                checkpoint_name: name,
                vocab_size: tokenizer.vocab_size(),
                max_context_tokens: 1024,
            },
            tokenizer: Arc::new(tokenizer),
            script,
        }
    }
}

struct ScriptSession<'a> {
    lm: &'a ScriptedLm,
    plan: Option<Vec<u32>>,
    step: usize,
    fed: usize,
}

impl LogitsSession for ScriptSession<'_> {
    fn feed(&mut self, ids: &[u32], segments: &[u32]) -> Result<Vec<f32>> {
        if ids.is_empty() || ids.len() != segments.len() {
            return Err(BackendError::InvalidConfig("feed needs aligned, non-empty ids and segments".into()));
        }
        self.fed += ids.len();
        if self.fed > self.lm.spec.max_context_tokens {
            return Err(BackendError::InputTooLong {
                len: self.fed,
                max: self.lm.spec.max_context_tokens,
            });
        }
        let specials = *self.lm.tokenizer.specials();
        let plan = self.plan.get_or_insert_with(|| match &self.lm.script {
            Script::Fixed(text) => text.bytes().map(u32::from).collect(),
            Script::EchoQuestion => ids
                .iter()
                .zip(segments)
                .filter(|(id, seg)| **seg == specials.question && **id != specials.question)
                .map(|(id, _)| *id)
                .collect(),
        });
        let next = plan.get(self.step).copied().unwrap_or(specials.eos);
        self.step += 1;
        let mut logits = vec![f32::NEG_INFINITY; self.lm.spec.vocab_size];
        logits[next as usize] = 0.0;
        Ok(logits)
    }
}

impl LanguageModel for ScriptedLm {
    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn tokenizer(&self) -> &GenTokenizer {
        &self.tokenizer
    }

    fn session(&self) -> Box<dyn LogitsSession + '_> {
        Box::new(ScriptSession {
            lm: self,
            plan: None,
            step: 0,
            fed: 0,
        })
    }

    fn forward_train(&self, seqs: &[TokenSeq], mc_positions: Option<&[usize]>) -> Result<LmOutputs> {
        let b = seqs.len();
        let t = seqs.iter().map(TokenSeq::len).max().unwrap_or(0).max(1);
        let dev = device();
        Ok(LmOutputs {
            lm_logits: Tensor::zeros((b, t, self.spec.vocab_size), DType::F32, &dev)?,
            mc_logits: match mc_positions {
                Some(_) => Some(Tensor::zeros(b, DType::F32, &dev)?),
                None => None,
            },
        })
    }

    fn fork(&self) -> Result<Arc<dyn LanguageModel>> {
        Ok(Arc::new(self.clone()))
    }

    fn checksum(&self) -> u64 {
        fnv1a(self.spec.checkpoint_name.as_bytes())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        save_stub_manifest(dir, "generator", &self.spec.checkpoint_name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn name(&self) -> &str {
        "stub:identity"
    }

    fn supports(&self, _source_lang: &str, _target_lang: &str) -> bool {
        true
    }

    fn translate(&self, texts: &[&str], _source_lang: &str, _target_lang: &str) -> Result<Vec<String>> {
        Ok(texts.iter().map(|t| t.to_string()).collect())
    }
}

/// Word-for-word dictionary translator. Unknown words pass through unchanged.
#[derive(Debug, Clone, Default)]
pub struct LexiconTranslator {
    tables: HashMap<(String, String), HashMap<String, String>>,
}

impl LexiconTranslator {
    pub fn with_pair(mut self, source_lang: &str, target_lang: &str, words: &[(&str, &str)]) -> Self {
        let table = words.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        self.tables.insert((source_lang.into(), target_lang.into()), table);
        self
    }
}

impl Translator for LexiconTranslator {
    fn name(&self) -> &str {
        "stub:lexicon"
    }

    fn supports(&self, source_lang: &str, target_lang: &str) -> bool {
        self.tables.contains_key(&(source_lang.to_string(), target_lang.to_string()))
    }

    fn translate(&self, texts: &[&str], source_lang: &str, target_lang: &str) -> Result<Vec<String>> {
        let table = self
            .tables
            .get(&(source_lang.to_string(), target_lang.to_string()))
            .ok_or_else(|| BackendError::UnsupportedLanguagePair {
                source_lang: source_lang.into(),
                target_lang: target_lang.into(),
            })?;
        Ok(texts
            .iter()
            .map(|t| {
                word_tokens(t)
                    .iter()
                    .map(|w| table.get(w).cloned().unwrap_or_else(|| w.clone()))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect())
    }
}

fn seed_of(name: &str) -> u64 {
    fnv1a(name.as_bytes())
}

/// Builds the encoder named by a `stub:` checkpoint.
pub fn encoder(name: &str) -> Result<Arc<dyn TextEncoder>> {
    let rest = strip(name)?;
    match rest {
        "hash" => Ok(Arc::new(HashEncoder::new(64))),
        "bert-tiny" | "bert-mini" => {
            let hidden = if rest == "bert-tiny" { 32 } else { 64 };
            let cfg = BertConfig::tiny((HASH_BUCKETS + 3) as usize, hidden, 2);
            Ok(Arc::new(NeuralEncoder::seeded(
                name,
                cfg,
                EncoderTokenizer::hashed(HASH_BUCKETS),
                Pooling::Mean,
                128,
                seed_of(name),
            )?))
        }
        _ => match rest.strip_prefix("hash-").map(str::parse::<usize>) {
            Some(Ok(d)) if d > 0 => Ok(Arc::new(HashEncoder::new(d))),
            _ => Err(unknown(name, "encoder")),
        },
    }
}

pub fn pair_scorer(name: &str) -> Result<Arc<dyn PairScorer>> {
    match strip(name)? {
        "overlap" => Ok(Arc::new(OverlapScorer::default())),
        "cross-tiny" => {
            let cfg = BertConfig::tiny((HASH_BUCKETS + 3) as usize, 32, 2);
            Ok(Arc::new(NeuralCrossEncoder::seeded(
                name,
                cfg,
                EncoderTokenizer::hashed(HASH_BUCKETS),
                256,
                seed_of(name),
            )?))
        }
        _ => Err(unknown(name, "pair scorer")),
    }
}

pub fn generator(name: &str) -> Result<Arc<dyn LanguageModel>> {
    let rest = strip(name)?;
    match rest {
        "script" => Ok(Arc::new(ScriptedLm::fixed(DEFAULT_SCRIPT))),
        "echo" => Ok(Arc::new(ScriptedLm::echo())),
        "gpt2-tiny" => {
            let tok = GenTokenizer::bytes();
            let cfg = Gpt2Config::tiny(tok.vocab_size());
            Ok(Arc::new(NeuralLm::seeded(name, cfg, tok, seed_of(name))?))
        }
        _ => match rest.strip_prefix("script:") {
            Some(text) if !text.is_empty() => Ok(Arc::new(ScriptedLm::fixed(text))),
            _ => Err(unknown(name, "generator")),
        },
    }
}

pub fn translator(name: &str) -> Result<Arc<dyn Translator>> {
    match strip(name)? {
        "identity" => Ok(Arc::new(IdentityTranslator)),
        _ => Err(unknown(name, "translator")),
    }
}

fn strip(name: &str) -> Result<&str> {
    name.strip_prefix(PREFIX)
        .ok_or_else(|| BackendError::unavailable(name, "not a stub checkpoint"))
}

fn unknown(name: &str, kind: &str) -> BackendError {
    BackendError::unavailable(name, format!("no stub {kind} by that name"))
}
