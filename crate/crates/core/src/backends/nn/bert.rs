//! BERT-style post-norm encoder. DistilBERT checkpoints load into the same
//! structure with `type_vocab_size = 0`.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Embedding, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::backends::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    GeluNew,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Gelu => x.gelu_erf(),
            Activation::GeluNew => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_act")]
    pub hidden_act: Activation,
}

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

fn default_act() -> Activation {
    Activation::Gelu
}

impl BertConfig {
    /// Reads a Hugging Face `config.json` of model type `bert` or `distilbert`.
    pub fn from_hf(config: &serde_json::Value) -> std::result::Result<Self, String> {
        let model_type = config.get("model_type").and_then(|v| v.as_str()).unwrap_or("bert");
        let get = |k: &str| config.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let act = |k: &str| -> std::result::Result<Activation, String> {
            match config.get(k).and_then(|v| v.as_str()).unwrap_or("gelu") {
                "gelu" => Ok(Activation::Gelu),
                "gelu_new" | "gelu_pytorch_tanh" => Ok(Activation::GeluNew),
                "relu" => Ok(Activation::Relu),
                other => Err(format!("unsupported activation `{other}`")),
            }
        };
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| format!("config lacks `{k}`"));
        match model_type {
            "bert" => Ok(Self {
                vocab_size: need(get("vocab_size"), "vocab_size")?,
                hidden_size: need(get("hidden_size"), "hidden_size")?,
                num_hidden_layers: need(get("num_hidden_layers"), "num_hidden_layers")?,
                num_attention_heads: need(get("num_attention_heads"), "num_attention_heads")?,
                intermediate_size: need(get("intermediate_size"), "intermediate_size")?,
                max_position_embeddings: get("max_position_embeddings").unwrap_or(512),
                type_vocab_size: get("type_vocab_size").unwrap_or(2),
                layer_norm_eps: config
                    .get("layer_norm_eps")
                    .and_then(|v| v.as_f64())
                    .unwrap_or(1e-12),
                hidden_act: act("hidden_act")?,
            }),
            "distilbert" => Ok(Self {
                vocab_size: need(get("vocab_size"), "vocab_size")?,
                hidden_size: need(get("dim"), "dim")?,
                num_hidden_layers: need(get("n_layers"), "n_layers")?,
                num_attention_heads: need(get("n_heads"), "n_heads")?,
                intermediate_size: need(get("hidden_dim"), "hidden_dim")?,
                max_position_embeddings: get("max_position_embeddings").unwrap_or(512),
                type_vocab_size: 0,
                layer_norm_eps: 1e-12,
                hidden_act: act("activation")?,
            }),
            other => Err(format!("unsupported encoder model type `{other}`")),
        }
    }

    pub fn tiny(vocab_size: usize, hidden: usize, layers: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: 4,
            intermediate_size: hidden * 2,
            max_position_embeddings: 256,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_act: Activation::Gelu,
        }
    }
}

/// Layer norm built from primitive ops so gradients flow through it.
#[derive(Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f32,
}

impl LayerNorm {
    pub fn new(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(size, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(size, "bias", Init::Const(0.0))?,
            eps: eps as f32,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::layer_norm_slow(x, &self.weight, &self.bias, self.eps)
    }
}

fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    candle_nn::linear(in_dim, out_dim, vb)
}

struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm: LayerNorm,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, h) = x.dims3()?;
        let hd = h / self.heads;
        let split = |y: Tensor| -> candle_core::Result<Tensor> {
            y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = scores.broadcast_add(mask)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, h))?;
        self.norm.forward(&(self.out.forward(&ctx)? + x)?)
    }
}

struct Layer {
    attention: SelfAttention,
    intermediate: Linear,
    output: Linear,
    norm: LayerNorm,
    act: Activation,
}

impl Layer {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
        let a = self.attention.forward(x, mask)?;
        let i = self.act.apply(&self.intermediate.forward(&a)?)?;
        self.norm.forward(&(self.output.forward(&i)? + a)?)
    }
}

pub(crate) struct Bert {
    word: Embedding,
    position: Embedding,
    token_type: Option<Embedding>,
    norm: LayerNorm,
    layers: Vec<Layer>,
}

impl Bert {
    pub fn new(cfg: &BertConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let h = cfg.hidden_size;
        let emb = vb.pp("embeddings");
        let embedding = |n: usize, name: &str| -> candle_core::Result<Embedding> {
            let w = emb.pp(name).get_with_hints((n, h), "weight", Init::Randn { mean: 0.0, stdev: 0.02 })?;
            Ok(Embedding::new(w, h))
        };
        let word = embedding(cfg.vocab_size, "word_embeddings")?;
        let position = embedding(cfg.max_position_embeddings, "position_embeddings")?;
        let token_type = if cfg.type_vocab_size > 0 {
            Some(embedding(cfg.type_vocab_size, "token_type_embeddings")?)
        } else {
            None
        };
        let norm = LayerNorm::new(h, cfg.layer_norm_eps, emb.pp("LayerNorm"))?;
        let mut layers = Vec::with_capacity(cfg.num_hidden_layers);
        for i in 0..cfg.num_hidden_layers {
            let lv = vb.pp(format!("encoder.layer.{i}"));
            let att = lv.pp("attention");
            layers.push(Layer {
                attention: SelfAttention {
                    query: linear(h, h, att.pp("self.query"))?,
                    key: linear(h, h, att.pp("self.key"))?,
                    value: linear(h, h, att.pp("self.value"))?,
                    out: linear(h, h, att.pp("output.dense"))?,
                    norm: LayerNorm::new(h, cfg.layer_norm_eps, att.pp("output.LayerNorm"))?,
                    heads: cfg.num_attention_heads,
                },
                intermediate: linear(h, cfg.intermediate_size, lv.pp("intermediate.dense"))?,
                output: linear(cfg.intermediate_size, h, lv.pp("output.dense"))?,
                norm: LayerNorm::new(h, cfg.layer_norm_eps, lv.pp("output.LayerNorm"))?,
                act: cfg.hidden_act,
            });
        }
        Ok(Self {
            word,
            position,
            token_type,
            norm,
            layers,
        })
    }

    /// `ids`, `type_ids`: `[b, t]` u32; `mask`: `[b, t]` f32 with 1 for real tokens.
    /// Returns hidden states `[b, t, h]`.
    pub fn forward(&self, ids: &Tensor, type_ids: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let positions = Tensor::arange(0u32, t as u32, ids.device())?
            .unsqueeze(0)?
            .broadcast_as((b, t))?
            .contiguous()?;
        let mut x = (self.word.forward(ids)? + self.position.forward(&positions)?)?;
        if let Some(tt) = &self.token_type {
            x = (x + tt.forward(type_ids)?)?;
        }
        let mut x = self.norm.forward(&x)?;
        // Additive mask: 0 for tokens, -1e9 for padding, shaped [b, 1, 1, t].
        let additive = ((mask.to_dtype(DType::F32)? - 1.0)? * 1e9)?.reshape((b, 1, 1, t))?;
        for layer in &self.layers {
            x = layer.forward(&x, &additive)?;
        }
        Ok(x)
    }
}

/// Sequence-classification head: tanh pooler over the first token, then a linear layer.
pub(crate) struct ClassifierHead {
    pooler: Linear,
    classifier: Linear,
}

impl ClassifierHead {
    pub fn new(hidden: usize, num_labels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            pooler: linear(hidden, hidden, vb.pp("pooler.dense"))?,
            classifier: linear(hidden, num_labels, vb.pp("classifier"))?,
        })
    }

    /// `[b, t, h]` hidden states to `[b, num_labels]` logits.
    pub fn forward(&self, hidden: &Tensor) -> candle_core::Result<Tensor> {
        let first = hidden.narrow(1, 0, 1)?.squeeze(1)?;
        let pooled = self.pooler.forward(&first)?.tanh()?;
        self.classifier.forward(&pooled)
    }
}

/// Pads encoded sequences into `[b, t]` id, type-id and mask tensors.
pub(crate) fn pad_batch(
    seqs: &[(Vec<u32>, Vec<u32>)],
    pad: u32,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dev = super::device();
    let b = seqs.len();
    let t = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0).max(1);
    let mut ids = vec![pad; b * t];
    let mut types = vec![0u32; b * t];
    let mut mask = vec![0f32; b * t];
    for (i, (s, ty)) in seqs.iter().enumerate() {
        for (j, (&id, &tid)) in s.iter().zip(ty).enumerate() {
            ids[i * t + j] = id;
            types[i * t + j] = tid;
            mask[i * t + j] = 1.0;
        }
    }
    Ok((
        Tensor::from_vec(ids, (b, t), &dev)?,
        Tensor::from_vec(types, (b, t), &dev)?,
        Tensor::from_vec(mask, (b, t), &dev)?,
    ))
}
