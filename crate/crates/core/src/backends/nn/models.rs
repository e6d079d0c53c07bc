//! Backend implementations over the transformer architectures.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::bert::{pad_batch, Bert, BertConfig, ClassifierHead};
use super::gpt2::{to_u32_tensor, Gpt2, Gpt2Config, LayerCache};
use super::{load_weights, Params, MANIFEST_FILE, WEIGHTS_FILE};
use crate::backends::tokenize::{EncoderTokenizer, GenTokenizer, TokenizerKind};
use crate::backends::{
    BackendError, EncodeMode, EncoderSpec, GeneratorSpec, LanguageModel, LmOutputs, LogitsSession,
    PairScorer, Pooling, Result, TextEncoder, TokenSeq,
};
use crate::util::{fnv1a, mix};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub(crate) enum Manifest {
    Encoder {
        checkpoint_name: String,
        bert: BertConfig,
        pooling: Pooling,
        max_tokens: usize,
        normalize: bool,
        tokenizer: TokenizerKind,
    },
    CrossEncoder {
        checkpoint_name: String,
        bert: BertConfig,
        max_tokens: usize,
        tokenizer: TokenizerKind,
    },
    Generator {
        checkpoint_name: String,
        gpt2: Gpt2Config,
        tokenizer: TokenizerKind,
    },
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let bytes = serde_json::to_vec_pretty(manifest).map_err(|e| BackendError::Format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), bytes)?;
    Ok(())
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let raw = std::fs::read(path)?;
    serde_json::from_slice(&raw).map_err(|e| BackendError::Format(format!("{}: {e}", path.display())))
}

/// Keeps the tensors the architecture uses. Parameters absent from the
/// checkpoint get the deterministic initialisation; `required` must be present.
fn assemble_params(
    mut loaded: HashMap<String, Tensor>,
    expected: &[String],
    required: &str,
    seed: u64,
    build: impl Fn(&Params) -> candle_core::Result<()>,
) -> Result<Params> {
    if !loaded.contains_key(required) {
        return Err(BackendError::Format(format!(
            "checkpoint lacks `{required}`; not a supported architecture"
        )));
    }
    loaded.retain(|k, _| expected.contains(k));
    let missing: Vec<String> = expected.iter().filter(|n| !loaded.contains_key(*n)).cloned().collect();
    let params = Params::from_tensors(loaded)?;
    build(&params)?;
    if !missing.is_empty() {
        tracing::warn!(count = missing.len(), first = %missing[0], "parameters missing from checkpoint; initialised fresh");
        params.seeded_init(seed, Some(&missing))?;
    }
    Ok(params)
}

fn probe_names(build: impl Fn(&Params) -> candle_core::Result<()>) -> Result<Vec<String>> {
    let probe = Params::new();
    build(&probe)?;
    Ok(probe.names())
}

fn load_tokenizer(dir: &Path, kind: TokenizerKind) -> Result<EncoderTokenizer> {
    match kind {
        TokenizerKind::HashedWords { buckets } => Ok(EncoderTokenizer::hashed(buckets)),
        TokenizerKind::HuggingFace => EncoderTokenizer::from_dir(dir),
        TokenizerKind::Bytes => Err(BackendError::Format("byte tokenizer is generator-only".into())),
    }
}

/// Sentence-transformers pooling and normalisation settings, when present.
fn sentence_transformer_settings(dir: &Path) -> (Option<Pooling>, Option<usize>, bool) {
    let pooling = read_json(&dir.join("1_Pooling/config.json")).ok().map(|v| {
        if v.get("pooling_mode_cls_token").and_then(|b| b.as_bool()) == Some(true) {
            Pooling::FirstToken
        } else {
            Pooling::Mean
        }
    });
    let max_len = read_json(&dir.join("sentence_bert_config.json"))
        .ok()
        .and_then(|v| v.get("max_seq_length").and_then(|m| m.as_u64()))
        .map(|m| m as usize);
    let normalize = std::fs::read_to_string(dir.join("modules.json"))
        .map(|s| s.contains("Normalize"))
        .unwrap_or(false);
    (pooling, max_len, normalize)
}

fn tensor_checksum(params: &Params, salt: &str) -> u64 {
    mix(params.checksum(), fnv1a(salt.as_bytes()))
}

/// Bi-encoder over a BERT-style transformer.
pub struct NeuralEncoder {
    spec: EncoderSpec,
    cfg: BertConfig,
    normalize: bool,
    tokenizer: Arc<EncoderTokenizer>,
    params: Params,
    model: Bert,
}

impl NeuralEncoder {
    fn build(
        spec: EncoderSpec,
        cfg: BertConfig,
        normalize: bool,
        tokenizer: Arc<EncoderTokenizer>,
        params: Params,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.max_tokens > cfg.max_position_embeddings {
            return Err(BackendError::InvalidConfig(format!(
                "max_tokens {} exceeds {} positions",
                spec.max_tokens, cfg.max_position_embeddings
            )));
        }
        let model = Bert::new(&cfg, params.vb())?;
        Ok(Self {
            spec,
            cfg,
            normalize,
            tokenizer,
            params,
            model,
        })
    }

    /// Freshly initialised encoder with deterministic weights.
    pub fn seeded(
        checkpoint_name: &str,
        cfg: BertConfig,
        tokenizer: EncoderTokenizer,
        pooling: Pooling,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        let params = Params::new();
        let spec = EncoderSpec {
            checkpoint_name: checkpoint_name.to_string(),
            embedding_dim: cfg.hidden_size,
            max_tokens,
            pooling,
        };
        let enc = Self::build(spec, cfg, false, Arc::new(tokenizer), params)?;
        enc.params.seeded_init(seed, None)?;
        Ok(enc)
    }

    pub(crate) fn load(dir: &Path, checkpoint_name: &str, manifest: Option<Manifest>) -> Result<Self> {
        let weights = load_weights(&dir.join(WEIGHTS_FILE))?;
        let (cfg, pooling, max_tokens, normalize, tokenizer) = match manifest {
            Some(Manifest::Encoder {
                bert,
                pooling,
                max_tokens,
                normalize,
                tokenizer,
                ..
            }) => (bert, pooling, max_tokens, normalize, load_tokenizer(dir, tokenizer)?),
            Some(_) => return Err(BackendError::Format("manifest does not describe an encoder".into())),
            None => {
                let cfg = BertConfig::from_hf(&read_json(&dir.join("config.json"))?)
                    .map_err(BackendError::Format)?;
                let (pooling, max_len, normalize) = sentence_transformer_settings(dir);
                let max_tokens = max_len.unwrap_or(512).min(cfg.max_position_embeddings);
                (cfg, pooling.unwrap_or(Pooling::Mean), max_tokens, normalize, EncoderTokenizer::from_dir(dir)?)
            }
        };
        let build = |p: &Params| Bert::new(&cfg, p.vb()).map(|_| ());
        let expected = probe_names(build)?;
        let params = assemble_params(weights, &expected, "embeddings.word_embeddings.weight", 0, build)?;
        let spec = EncoderSpec {
            checkpoint_name: checkpoint_name.to_string(),
            embedding_dim: cfg.hidden_size,
            max_tokens,
            pooling,
        };
        Self::build(spec, cfg, normalize, Arc::new(tokenizer), params)
    }

    fn tokenize(&self, texts: &[&str]) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
        texts
            .iter()
            .map(|t| {
                self.tokenizer
                    .encode(t, self.spec.max_tokens)
                    .map(|e| (e.ids, e.type_ids))
            })
            .collect()
    }
}

impl TextEncoder for NeuralEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, texts: &[&str], _mode: EncodeMode) -> Result<Tensor> {
        if texts.is_empty() {
            return Ok(Tensor::zeros((0, self.spec.embedding_dim), candle_core::DType::F32, &super::device())?);
        }
        let (ids, types, mask) = pad_batch(&self.tokenize(texts)?, self.tokenizer.pad_id())?;
        let hidden = self.model.forward(&ids, &types, &mask)?;
        let pooled = match self.spec.pooling {
            Pooling::FirstToken => hidden.narrow(1, 0, 1)?.squeeze(1)?,
            Pooling::Mean => {
                let m = mask.unsqueeze(2)?;
                let summed = hidden.broadcast_mul(&m)?.sum(1)?;
                summed.broadcast_div(&m.sum(1)?)?
            }
        };
        let out = if self.normalize {
            let norm = pooled.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
            pooled.broadcast_div(&(norm + 1e-12)?)?
        } else {
            pooled
        };
        Ok(out)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    fn fork(&self) -> Result<Arc<dyn TextEncoder>> {
        Ok(Arc::new(Self::build(
            self.spec.clone(),
            self.cfg.clone(),
            self.normalize,
            Arc::clone(&self.tokenizer),
            self.params.fork()?,
        )?))
    }

    fn checksum(&self) -> u64 {
        tensor_checksum(&self.params, "encoder")
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_manifest(
            dir,
            &Manifest::Encoder {
                checkpoint_name: self.spec.checkpoint_name.clone(),
                bert: self.cfg.clone(),
                pooling: self.spec.pooling,
                max_tokens: self.spec.max_tokens,
                normalize: self.normalize,
                tokenizer: self.tokenizer.kind(),
            },
        )?;
        self.tokenizer.save(dir)?;
        self.params.save(&dir.join(WEIGHTS_FILE))
    }
}

/// BERT sequence-pair classifier producing one relevance logit per pair.
pub struct NeuralCrossEncoder {
    spec: EncoderSpec,
    cfg: BertConfig,
    tokenizer: Arc<EncoderTokenizer>,
    params: Params,
    model: Bert,
    head: ClassifierHead,
}

impl NeuralCrossEncoder {
    fn build(spec: EncoderSpec, cfg: BertConfig, tokenizer: Arc<EncoderTokenizer>, params: Params) -> Result<Self> {
        spec.validate()?;
        let model = Bert::new(&cfg, params.vb())?;
        let head = ClassifierHead::new(cfg.hidden_size, 1, params.vb())?;
        Ok(Self {
            spec,
            cfg,
            tokenizer,
            params,
            model,
            head,
        })
    }

    pub fn seeded(checkpoint_name: &str, cfg: BertConfig, tokenizer: EncoderTokenizer, max_tokens: usize, seed: u64) -> Result<Self> {
        let spec = EncoderSpec {
            checkpoint_name: checkpoint_name.to_string(),
            embedding_dim: cfg.hidden_size,
            max_tokens,
            pooling: Pooling::FirstToken,
        };
        let enc = Self::build(spec, cfg, Arc::new(tokenizer), Params::new())?;
        enc.params.seeded_init(seed, None)?;
        Ok(enc)
    }

    pub(crate) fn load(dir: &Path, checkpoint_name: &str, manifest: Option<Manifest>) -> Result<Self> {
        let weights = load_weights(&dir.join(WEIGHTS_FILE))?;
        let (cfg, max_tokens, tokenizer) = match manifest {
            Some(Manifest::CrossEncoder {
                bert,
                max_tokens,
                tokenizer,
                ..
            }) => (bert, max_tokens, load_tokenizer(dir, tokenizer)?),
            Some(_) => return Err(BackendError::Format("manifest does not describe a cross-encoder".into())),
            None => {
                let raw = read_json(&dir.join("config.json"))?;
                let labels = raw
                    .get("id2label")
                    .and_then(|v| v.as_object())
                    .map(|m| m.len())
                    .unwrap_or(1);
                if labels != 1 {
                    return Err(BackendError::Format(format!(
                        "cross-encoders with {labels} labels are unsupported; expected a single relevance logit"
                    )));
                }
                let cfg = BertConfig::from_hf(&raw).map_err(BackendError::Format)?;
                let max_tokens = 512.min(cfg.max_position_embeddings);
                (cfg, max_tokens, EncoderTokenizer::from_dir(dir)?)
            }
        };
        let build = |p: &Params| {
            Bert::new(&cfg, p.vb())?;
            ClassifierHead::new(cfg.hidden_size, 1, p.vb()).map(|_| ())
        };
        let expected = probe_names(build)?;
        let params = assemble_params(weights, &expected, "embeddings.word_embeddings.weight", 0, build)?;
        let spec = EncoderSpec {
            checkpoint_name: checkpoint_name.to_string(),
            embedding_dim: cfg.hidden_size,
            max_tokens,
            pooling: Pooling::FirstToken,
        };
        Self::build(spec, cfg, Arc::new(tokenizer), params)
    }
}

impl PairScorer for NeuralCrossEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn forward(&self, pairs: &[(&str, &str)]) -> Result<Tensor> {
        if pairs.is_empty() {
            return Ok(Tensor::zeros(0, candle_core::DType::F32, &super::device())?);
        }
        let encoded = pairs
            .iter()
            .map(|(q, p)| {
                self.tokenizer
                    .encode_pair(q, p, self.spec.max_tokens)
                    .map(|e| (e.ids, e.type_ids))
            })
            .collect::<Result<Vec<_>>>()?;
        let (ids, types, mask) = pad_batch(&encoded, self.tokenizer.pad_id())?;
        let hidden = self.model.forward(&ids, &types, &mask)?;
        Ok(self.head.forward(&hidden)?.squeeze(1)?)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    fn fork(&self) -> Result<Arc<dyn PairScorer>> {
        Ok(Arc::new(Self::build(
            self.spec.clone(),
            self.cfg.clone(),
            Arc::clone(&self.tokenizer),
            self.params.fork()?,
        )?))
    }

    fn checksum(&self) -> u64 {
        tensor_checksum(&self.params, "cross-encoder")
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_manifest(
            dir,
            &Manifest::CrossEncoder {
                checkpoint_name: self.spec.checkpoint_name.clone(),
                bert: self.cfg.clone(),
                max_tokens: self.spec.max_tokens,
                tokenizer: self.tokenizer.kind(),
            },
        )?;
        self.tokenizer.save(dir)?;
        self.params.save(&dir.join(WEIGHTS_FILE))
    }
}

/// GPT-2 language model with the candidate-discrimination head.
pub struct NeuralLm {
    spec: GeneratorSpec,
    cfg: Gpt2Config,
    tokenizer: Arc<GenTokenizer>,
    params: Params,
    model: Gpt2,
}

impl NeuralLm {
    fn build(spec: GeneratorSpec, cfg: Gpt2Config, tokenizer: Arc<GenTokenizer>, params: Params) -> Result<Self> {
        if tokenizer.vocab_size() > cfg.vocab_size {
            return Err(BackendError::InvalidConfig(format!(
                "tokenizer has {} ids but the embedding table only {}",
                tokenizer.vocab_size(),
                cfg.vocab_size
            )));
        }
        let model = Gpt2::new(&cfg, params.vb())?;
        Ok(Self {
            spec,
            cfg,
            tokenizer,
            params,
            model,
        })
    }

    pub fn seeded(checkpoint_name: &str, cfg: Gpt2Config, tokenizer: GenTokenizer, seed: u64) -> Result<Self> {
        let spec = GeneratorSpec {
            checkpoint_name: checkpoint_name.to_string(),
            vocab_size: cfg.vocab_size,
            max_context_tokens: cfg.n_positions,
        };
        let lm = Self::build(spec, cfg, Arc::new(tokenizer), Params::new())?;
        lm.params.seeded_init(seed, None)?;
        Ok(lm)
    }

    pub(crate) fn load(dir: &Path, checkpoint_name: &str, manifest: Option<Manifest>) -> Result<Self> {
        let mut weights = load_weights(&dir.join(WEIGHTS_FILE))?;
        let (mut cfg, tokenizer) = match manifest {
            Some(Manifest::Generator { gpt2, tokenizer, .. }) => {
                let tok = match tokenizer {
                    TokenizerKind::Bytes => GenTokenizer::bytes(),
                    TokenizerKind::HuggingFace => GenTokenizer::from_dir(dir)?,
                    TokenizerKind::HashedWords { .. } => {
                        return Err(BackendError::Format("hashed words cannot be decoded".into()))
                    }
                };
                (gpt2, tok)
            }
            Some(_) => return Err(BackendError::Format("manifest does not describe a generator".into())),
            None => (
                Gpt2Config::from_hf(&read_json(&dir.join("config.json"))?).map_err(BackendError::Format)?,
                GenTokenizer::from_dir(dir)?,
            ),
        };
        // Marker tokens added to the tokenizer need embedding rows.
        if tokenizer.vocab_size() > cfg.vocab_size {
            let extra = tokenizer.vocab_size() - cfg.vocab_size;
            let wte = weights
                .get("wte.weight")
                .ok_or_else(|| BackendError::Format("checkpoint lacks `wte.weight`".into()))?;
            let fresh = Params::new();
            fresh.vb().get((extra, cfg.n_embd), "extra.weight")?;
            fresh.seeded_init(fnv1a(checkpoint_name.as_bytes()), None)?;
            let rows = fresh.get("extra.weight").expect("created above");
            let grown = Tensor::cat(&[wte, rows.as_tensor()], 0)?;
            weights.insert("wte.weight".into(), grown);
            cfg.vocab_size = tokenizer.vocab_size();
        }
        let build = |p: &Params| Gpt2::new(&cfg, p.vb()).map(|_| ());
        let expected = probe_names(build)?;
        let params = assemble_params(weights, &expected, "wte.weight", 0, build)?;
        let spec = GeneratorSpec {
            checkpoint_name: checkpoint_name.to_string(),
            vocab_size: cfg.vocab_size,
            max_context_tokens: cfg.n_positions,
        };
        Self::build(spec, cfg, Arc::new(tokenizer), params)
    }
}

struct Gpt2Session<'a> {
    lm: &'a NeuralLm,
    caches: Vec<LayerCache>,
    offset: usize,
}

impl LogitsSession for Gpt2Session<'_> {
    fn feed(&mut self, ids: &[u32], segments: &[u32]) -> Result<Vec<f32>> {
        if ids.is_empty() || ids.len() != segments.len() {
            return Err(BackendError::InvalidConfig("feed needs aligned, non-empty ids and segments".into()));
        }
        let total = self.offset + ids.len();
        if total > self.lm.model.n_positions {
            return Err(BackendError::InputTooLong {
                len: total,
                max: self.lm.model.n_positions,
            });
        }
        let ids_t = to_u32_tensor(&[ids.to_vec()], 0)?;
        let seg_t = to_u32_tensor(&[segments.to_vec()], 0)?;
        let hidden = self.lm.model.hidden(&ids_t, &seg_t, self.offset, Some(&mut self.caches))?;
        self.offset = total;
        let last = hidden.narrow(1, ids.len() - 1, 1)?.squeeze(1)?.squeeze(0)?;
        Ok(self.lm.model.lm_logits(&last.unsqueeze(0)?)?.squeeze(0)?.to_vec1::<f32>()?)
    }
}

impl LanguageModel for NeuralLm {
    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn tokenizer(&self) -> &GenTokenizer {
        &self.tokenizer
    }

    fn session(&self) -> Box<dyn LogitsSession + '_> {
        Box::new(Gpt2Session {
            lm: self,
            caches: vec![LayerCache::default(); self.model.layers()],
            offset: 0,
        })
    }

    fn forward_train(&self, seqs: &[TokenSeq], mc_positions: Option<&[usize]>) -> Result<LmOutputs> {
        let longest = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
        if longest > self.model.n_positions {
            return Err(BackendError::InputTooLong {
                len: longest,
                max: self.model.n_positions,
            });
        }
        let pad = self.tokenizer.specials().pad;
        let ids: Vec<Vec<u32>> = seqs.iter().map(|s| s.ids.clone()).collect();
        let segs: Vec<Vec<u32>> = seqs.iter().map(|s| s.segments.clone()).collect();
        let hidden = self
            .model
            .hidden(&to_u32_tensor(&ids, pad)?, &to_u32_tensor(&segs, pad)?, 0, None)?;
        let lm_logits = self.model.lm_logits(&hidden)?;
        let mc_logits = match mc_positions {
            Some(p) => Some(self.model.mc_logits(&hidden, p)?),
            None => None,
        };
        Ok(LmOutputs { lm_logits, mc_logits })
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    fn fork(&self) -> Result<Arc<dyn LanguageModel>> {
        Ok(Arc::new(Self::build(
            self.spec.clone(),
            self.cfg.clone(),
            Arc::clone(&self.tokenizer),
            self.params.fork()?,
        )?))
    }

    fn checksum(&self) -> u64 {
        tensor_checksum(&self.params, "generator")
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let tokenizer = if self.tokenizer.is_bytes() {
            TokenizerKind::Bytes
        } else {
            TokenizerKind::HuggingFace
        };
        write_manifest(
            dir,
            &Manifest::Generator {
                checkpoint_name: self.spec.checkpoint_name.clone(),
                gpt2: self.cfg.clone(),
                tokenizer,
            },
        )?;
        self.tokenizer.save(dir)?;
        self.params.save(&dir.join(WEIGHTS_FILE))
    }
}
