//! GPT-2 decoder with a tied LM head, a candidate-scoring head and a KV cache.

use candle_core::{Module, Tensor, D};
use candle_nn::{Embedding, Init, VarBuilder};
use serde::{Deserialize, Serialize};

use super::bert::LayerNorm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gpt2Config {
    pub vocab_size: usize,
    pub n_positions: usize,
    pub n_embd: usize,
    pub n_layer: usize,
    pub n_head: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_epsilon: f64,
    #[serde(default)]
    pub n_inner: Option<usize>,
}

fn default_eps() -> f64 {
    1e-5
}

impl Gpt2Config {
    pub fn from_hf(config: &serde_json::Value) -> std::result::Result<Self, String> {
        let model_type = config.get("model_type").and_then(|v| v.as_str()).unwrap_or("gpt2");
        if model_type != "gpt2" {
            return Err(format!("unsupported generator model type `{model_type}`"));
        }
        serde_json::from_value(config.clone()).map_err(|e| e.to_string())
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_positions: 512,
            n_embd: 32,
            n_layer: 2,
            n_head: 4,
            layer_norm_epsilon: 1e-5,
            n_inner: None,
        }
    }

    fn inner(&self) -> usize {
        self.n_inner.unwrap_or(4 * self.n_embd)
    }
}

/// HF `Conv1D`: weight stored `[in, out]`.
struct Conv1D {
    weight: Tensor,
    bias: Tensor,
}

impl Conv1D {
    fn new(nx: usize, nf: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints((nx, nf), "weight", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            bias: vb.get_with_hints(nf, "bias", Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let nx = dims[dims.len() - 1];
        let rows = x.elem_count() / nx;
        let y = x.reshape((rows, nx))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty dims") = self.weight.dim(1)?;
        y.reshape(out_dims)
    }
}

struct Block {
    ln_1: LayerNorm,
    c_attn: Conv1D,
    c_proj: Conv1D,
    ln_2: LayerNorm,
    c_fc: Conv1D,
    mlp_proj: Conv1D,
    n_head: usize,
}

/// Per-layer cached keys and values, `[b, heads, t, hd]`.
#[derive(Default, Clone)]
pub(crate) struct LayerCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl Block {
    fn attn(&self, x: &Tensor, cache: Option<&mut LayerCache>) -> candle_core::Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.n_head;
        let qkv = self.c_attn.forward(x)?;
        let split = |i: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(D::Minus1, i * c, c)?
                .reshape((b, t, self.n_head, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(0)?;
        let mut k = split(1)?;
        let mut v = split(2)?;
        let past = match cache {
            Some(cache) => {
                if let (Some(pk), Some(pv)) = (&cache.k, &cache.v) {
                    k = Tensor::cat(&[pk, &k], 2)?;
                    v = Tensor::cat(&[pv, &v], 2)?;
                }
                cache.k = Some(k.clone());
                cache.v = Some(v.clone());
                k.dim(2)? - t
            }
            None => 0,
        };
        let total = past + t;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let mask = causal_mask(t, past, total, x.device())?;
        let scores = scores.broadcast_add(&mask)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, c))?;
        self.c_proj.forward(&ctx)
    }

    fn forward(&self, x: &Tensor, cache: Option<&mut LayerCache>) -> candle_core::Result<Tensor> {
        let x = (x + self.attn(&self.ln_1.forward(x)?, cache)?)?;
        let h = self.c_fc.forward(&self.ln_2.forward(&x)?)?.gelu()?;
        x + self.mlp_proj.forward(&h)?
    }
}

fn causal_mask(t: usize, past: usize, total: usize, dev: &candle_core::Device) -> candle_core::Result<Tensor> {
    let mut m = vec![0f32; t * total];
    for i in 0..t {
        for j in (past + i + 1)..total {
            m[i * total + j] = -1e9;
        }
    }
    Tensor::from_vec(m, (1, 1, t, total), dev)
}

pub(crate) struct Gpt2 {
    wte: Embedding,
    wpe: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    mc_head: candle_nn::Linear,
    pub n_positions: usize,
}

impl Gpt2 {
    pub fn new(cfg: &Gpt2Config, vb: VarBuilder) -> candle_core::Result<Self> {
        let c = cfg.n_embd;
        let init = Init::Randn { mean: 0.0, stdev: 0.02 };
        let wte = Embedding::new(vb.pp("wte").get_with_hints((cfg.vocab_size, c), "weight", init)?, c);
        let wpe = Embedding::new(vb.pp("wpe").get_with_hints((cfg.n_positions, c), "weight", init)?, c);
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for i in 0..cfg.n_layer {
            let bv = vb.pp(format!("h.{i}"));
            blocks.push(Block {
                ln_1: LayerNorm::new(c, cfg.layer_norm_epsilon, bv.pp("ln_1"))?,
                c_attn: Conv1D::new(c, 3 * c, bv.pp("attn.c_attn"))?,
                c_proj: Conv1D::new(c, c, bv.pp("attn.c_proj"))?,
                ln_2: LayerNorm::new(c, cfg.layer_norm_epsilon, bv.pp("ln_2"))?,
                c_fc: Conv1D::new(c, cfg.inner(), bv.pp("mlp.c_fc"))?,
                mlp_proj: Conv1D::new(cfg.inner(), c, bv.pp("mlp.c_proj"))?,
                n_head: cfg.n_head,
            });
        }
        let ln_f = LayerNorm::new(c, cfg.layer_norm_epsilon, vb.pp("ln_f"))?;
        let mc_head = candle_nn::linear(c, 1, vb.pp("multiple_choice_head.summary"))?;
        Ok(Self {
            wte,
            wpe,
            blocks,
            ln_f,
            mc_head,
            n_positions: cfg.n_positions,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Hidden states `[b, t, c]` for ids/segments `[b, t]` starting at `offset`.
    pub fn hidden(
        &self,
        ids: &Tensor,
        segments: &Tensor,
        offset: usize,
        mut cache: Option<&mut [LayerCache]>,
    ) -> candle_core::Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let positions = Tensor::arange(offset as u32, (offset + t) as u32, ids.device())?
            .unsqueeze(0)?
            .broadcast_as((b, t))?
            .contiguous()?;
        let mut x = ((self.wte.forward(ids)? + self.wpe.forward(&positions)?)? + self.wte.forward(segments)?)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let c = cache.as_deref_mut().map(|c| &mut c[i]);
            x = block.forward(&x, c)?;
        }
        self.ln_f.forward(&x)
    }

    /// Tied LM head: `[.., c]` to `[.., vocab]`.
    pub fn lm_logits(&self, hidden: &Tensor) -> candle_core::Result<Tensor> {
        let dims = hidden.dims().to_vec();
        let c = dims[dims.len() - 1];
        let rows = hidden.elem_count() / c;
        let w = self.wte.embeddings();
        let logits = hidden.reshape((rows, c))?.matmul(&w.t()?)?;
        let mut out = dims;
        *out.last_mut().expect("non-empty dims") = w.dim(0)?;
        logits.reshape(out)
    }

    /// Candidate scores `[b]` from the hidden state at `positions[i]` of row `i`.
    pub fn mc_logits(&self, hidden: &Tensor, positions: &[usize]) -> candle_core::Result<Tensor> {
        let (b, _t, c) = hidden.dims3()?;
        let idx: Vec<u32> = positions.iter().map(|&p| p as u32).collect();
        let idx = Tensor::from_vec(idx, (b, 1, 1), hidden.device())?.broadcast_as((b, 1, c))?.contiguous()?;
        let picked = hidden.gather(&idx, 1)?.squeeze(1)?;
        self.mc_head.forward(&picked)?.squeeze(1)
    }
}

pub(crate) fn to_u32_tensor(rows: &[Vec<u32>], pad: u32) -> candle_core::Result<Tensor> {
    let b = rows.len();
    let t = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut data = vec![pad; b * t];
    for (i, r) in rows.iter().enumerate() {
        data[i * t..i * t + r.len()].copy_from_slice(r);
    }
    Tensor::from_vec(data, (b, t), &super::device())
}
