//! Transformer runtime on top of `candle`.
//!
//! Architectures are written here (BERT-family encoders, GPT-2 decoders)
//! with differentiable layer norms, so every model can be fine-tuned by the
//! trainers in this crate. Checkpoints load from Hugging Face style
//! directories (`config.json` + `model.safetensors` + tokenizer files) or
//! from directories written by [`save`](crate::backends::TextEncoder::save),
//! which add a `naa_model.json` manifest.

mod bert;
mod gpt2;
mod models;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use bert::{Activation, BertConfig};
pub use gpt2::Gpt2Config;
pub use models::{NeuralCrossEncoder, NeuralEncoder, NeuralLm};
pub(crate) use models::Manifest;

use super::{BackendError, Result};
use crate::util::{fnv1a, mix};

pub const MANIFEST_FILE: &str = "naa_model.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";

pub(crate) fn device() -> Device {
    Device::Cpu
}

/// Named parameter set backing one model.
pub(crate) struct Params {
    map: VarMap,
}

impl Params {
    pub fn new() -> Self {
        Self { map: VarMap::new() }
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>) -> Result<Self> {
        let params = Self::new();
        {
            let mut data = params.map.data().lock().expect("varmap lock");
            for (name, t) in tensors {
                let t = t.to_dtype(DType::F32)?;
                data.insert(name, Var::from_tensor(&t)?);
            }
        }
        Ok(params)
    }

    pub fn vb(&self) -> VarBuilder<'static> {
        VarBuilder::from_varmap(&self.map, DType::F32, &device())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .map
            .data()
            .lock()
            .expect("varmap lock")
            .keys()
            .cloned()
            .collect();
        names.sort();
        names
    }

    /// Vars sorted by name.
    pub fn vars(&self) -> Vec<Var> {
        let data = self.map.data().lock().expect("varmap lock");
        let mut pairs: Vec<(&String, &Var)> = data.iter().collect();
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.map.data().lock().expect("varmap lock").get(name).cloned()
    }

    /// Deterministic re-initialisation: biases 0, norm gains 1, everything else N(0, 0.02).
    pub fn seeded_init(&self, seed: u64, only: Option<&[String]>) -> Result<()> {
        let data = self.map.data().lock().expect("varmap lock");
        for (name, var) in data.iter() {
            if let Some(only) = only {
                if !only.contains(name) {
                    continue;
                }
            }
            let shape = var.shape().clone();
            let t = if name.ends_with("bias") {
                Tensor::zeros(&shape, DType::F32, &device())?
            } else if is_norm_weight(name) {
                Tensor::ones(&shape, DType::F32, &device())?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, fnv1a(name.as_bytes())));
                let normal = Normal::new(0.0f32, 0.02).expect("valid std");
                let values: Vec<f32> = (0..shape.elem_count()).map(|_| normal.sample(&mut rng)).collect();
                Tensor::from_vec(values, &shape, &device())?
            };
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn fork(&self) -> Result<Self> {
        let data = self.map.data().lock().expect("varmap lock");
        let mut copies = HashMap::with_capacity(data.len());
        for (name, var) in data.iter() {
            copies.insert(name.clone(), var.as_tensor().copy()?);
        }
        drop(data);
        Self::from_tensors(copies)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for (name, var) in self.names().iter().zip(self.vars()) {
            h = mix(h, fnv1a(name.as_bytes()));
            if let Ok(values) = var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f32>()) {
                for v in values {
                    h = mix(h, u64::from(v.to_bits()));
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.map.save(path)?;
        Ok(())
    }
}

fn is_norm_weight(name: &str) -> bool {
    name.ends_with("weight")
        && (name.contains("LayerNorm") || name.contains("ln_") || name.contains("layer_norm"))
}

/// Maps checkpoint tensor names onto the canonical names used by the
/// architectures here: Hugging Face BERT / GPT-2 names without model prefixes.
pub(crate) fn canonical_name(raw: &str) -> String {
    let mut name = raw.to_string();
    for prefix in ["bert.", "distilbert.", "model."] {
        if let Some(rest) = name.strip_prefix(prefix) {
            name = rest.to_string();
            break;
        }
    }
    if !name.starts_with("transformer.layer.") {
        if let Some(rest) = name.strip_prefix("transformer.") {
            name = rest.to_string();
        }
    }
    if name.contains("LayerNorm") || name.contains("layer_norm") {
        if let Some(stem) = name.strip_suffix(".gamma") {
            name = format!("{stem}.weight");
        } else if let Some(stem) = name.strip_suffix(".beta") {
            name = format!("{stem}.bias");
        }
    }
    if let Some(rest) = name.strip_prefix("transformer.layer.") {
        // DistilBERT block names.
        let (idx, tail) = rest.split_once('.').unwrap_or((rest, ""));
        let mapped = match tail.rsplit_once('.') {
            Some((module, leaf)) => {
                let m = match module {
                    "attention.q_lin" => "attention.self.query",
                    "attention.k_lin" => "attention.self.key",
                    "attention.v_lin" => "attention.self.value",
                    "attention.out_lin" => "attention.output.dense",
                    "sa_layer_norm" => "attention.output.LayerNorm",
                    "ffn.lin1" => "intermediate.dense",
                    "ffn.lin2" => "output.dense",
                    "output_layer_norm" => "output.LayerNorm",
                    other => other,
                };
                format!("{m}.{leaf}")
            }
            None => tail.to_string(),
        };
        name = format!("encoder.layer.{idx}.{mapped}");
    }
    name
}

/// Loads a safetensors file with canonical names.
pub(crate) fn load_weights(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(BackendError::Format(format!(
            "missing weights file {} (only safetensors checkpoints are supported)",
            path.display()
        )));
    }
    let raw = candle_core::safetensors::load(path, &device())?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| (canonical_name(&k), v))
        .collect())
}
