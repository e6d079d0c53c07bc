//! Multiple negatives ranking loss: each query's paired passage is the
//! positive and every other passage in the batch a negative.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::{Result, RetrievalError, Similarity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnrlConfig {
    /// τ in `s_ij = τ·sim(q_i, p_j)`.
    pub scale: f64,
    pub similarity: Similarity,
    pub batch_size: usize,
}

impl Default for MnrlConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            similarity: Similarity::Dot,
            batch_size: 16,
        }
    }
}

impl MnrlConfig {
    pub fn cosine() -> Self {
        Self {
            scale: 20.0,
            similarity: Similarity::Cosine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(RetrievalError::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.batch_size == 0 {
            return Err(RetrievalError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// `(1/B)·Σ_i −log softmax_j(s_ij)[i]`, evaluated with a max-shifted
/// log-sum-exp. Works for any float dtype and is differentiable.
pub fn mnrl_loss(queries: &Tensor, positives: &Tensor, cfg: &MnrlConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (b, d) = queries.dims2()?;
    let (bp, dp) = positives.dims2()?;
    if b != bp {
        return Err(RetrievalError::DimensionMismatch { expected: b, got: bp });
    }
    if d != dp {
        return Err(RetrievalError::DimensionMismatch { expected: d, got: dp });
    }
    if b == 0 {
        return Err(RetrievalError::EmptyTrainingSet);
    }
    let (q, p) = match cfg.similarity {
        Similarity::Dot => (queries.clone(), positives.clone()),
        Similarity::Cosine => (unit_rows(queries)?, unit_rows(positives)?),
    };
    let scores = (q.matmul(&p.t()?)? * cfg.scale)?;
    let targets = Tensor::arange(0u32, b as u32, scores.device())?;
    Ok(candle_nn::loss::cross_entropy(&scores, &targets)?)
}
