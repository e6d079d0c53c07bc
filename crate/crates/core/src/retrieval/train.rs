//! Training-pair preparation and contrastive fine-tuning of the retriever
//! and the re-ranker.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mnrl_loss, MnrlConfig, Result, RetrievalError};
use crate::backends::{EncodeMode, PairScorer, TextEncoder};
use crate::train::{cross_entropy, shuffled_batches, LinearSchedule, ScheduledAdamW};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub question: String,
    pub passage: String,
}

/// A question with its candidate supporting passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eli5Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub passages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eli5Split {
    pub train: Vec<TrainingPair>,
    pub test: Vec<TrainingPair>,
    /// Records without passages.
    pub skipped: usize,
}

pub const ELI5_TEST_FRACTION: f64 = 0.15;

/// Pairs each question with its highest-scoring passage (first wins ties),
/// shuffles under `seed`, and holds out `round(0.15·n)` pairs for testing.
pub fn prepare_eli5_pairs(records: &[Eli5Record], reranker: &dyn PairScorer, seed: u64) -> Result<Eli5Split> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        if r.passages.is_empty() || r.question.trim().is_empty() {
            skipped += 1;
            continue;
        }
        let candidates: Vec<(&str, &str)> = r.passages.iter().map(|p| (r.question.as_str(), p.as_str())).collect();
        let scores = reranker.score_pairs(&candidates)?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        pairs.push(TrainingPair {
            question: r.question.clone(),
            passage: r.passages[best].clone(),
        });
    }
    if skipped > 0 {
        tracing::warn!(skipped, "records without passages skipped");
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (pairs.len() as f64 * ELI5_TEST_FRACTION).round() as usize;
    let test = pairs.split_off(pairs.len() - n_test);
    Ok(Eli5Split {
        train: pairs,
        test,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiEncoderTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mnrl: MnrlConfig,
}

impl Default for BiEncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 2e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            seed: 0,
            mnrl: MnrlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossEncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CrossEncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Loss trajectory of a fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrainLog {
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(f64::from(t.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?))
}

fn run_epochs(
    n: usize,
    batch: usize,
    epochs: usize,
    seed: u64,
    opt: &mut ScheduledAdamW,
    mut batch_loss: impl FnMut(&[usize]) -> Result<candle_core::Tensor>,
) -> Result<RetrievalTrainLog> {
    let mut log = RetrievalTrainLog::default();
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(n, batch, seed, epoch);
        for idx in &batches {
            let loss = batch_loss(idx)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(RetrievalError::Format(format!("non-finite loss at epoch {epoch}")));
            }
            let mut grads = loss.backward()?;
            opt.step(&mut grads)?;
            log.step_losses.push(value);
            sum += value;
        }
        log.epoch_losses.push(sum / batches.len() as f64);
        tracing::info!(epoch, loss = log.epoch_losses[epoch], "epoch finished");
    }
    Ok(log)
}

/// Fine-tunes a copy of `encoder` with in-batch negatives. `encoder` itself is untouched.
pub fn train_bi_encoder(
    pairs: &[TrainingPair],
    encoder: &dyn TextEncoder,
    cfg: &BiEncoderTrainConfig,
) -> Result<(Arc<dyn TextEncoder>, RetrievalTrainLog)> {
    if pairs.is_empty() {
        return Err(RetrievalError::EmptyTrainingSet);
    }
    cfg.mnrl.validate()?;
    let model = encoder.fork()?;
    let b = cfg.mnrl.batch_size;
    let total = cfg.epochs * pairs.len().div_ceil(b);
    let schedule = LinearSchedule::with_ratio(cfg.learning_rate, cfg.warmup_ratio, total);
    let mut opt = ScheduledAdamW::new(model.trainable_vars(), schedule, cfg.weight_decay, None)?;
    let log = run_epochs(pairs.len(), b, cfg.epochs, cfg.seed, &mut opt, |idx| {
        let q: Vec<&str> = idx.iter().map(|&i| pairs[i].question.as_str()).collect();
        let p: Vec<&str> = idx.iter().map(|&i| pairs[i].passage.as_str()).collect();
        let qe = model.forward(&q, EncodeMode::Query)?;
        let pe = model.forward(&p, EncodeMode::Passage)?;
        mnrl_loss(&qe, &pe, &cfg.mnrl)
    })?;
    Ok((model, log))
}

/// Softmax over in-batch candidates for a pair scorer: row `i` scores
/// question `i` against every passage of the batch; passage `i` is the target.
pub fn cross_encoder_batch_loss(scorer: &dyn PairScorer, batch: &[&TrainingPair]) -> Result<candle_core::Tensor> {
    let b = batch.len();
    let mut grid = Vec::with_capacity(b * b);
    for q in batch {
        for p in batch {
            grid.push((q.question.as_str(), p.passage.as_str()));
        }
    }
    let scores = scorer.forward(&grid)?.reshape((b, b))?;
    let targets: Vec<u32> = (0..b as u32).collect();
    Ok(cross_entropy(&scores, &targets)?)
}

pub fn train_cross_encoder(
    pairs: &[TrainingPair],
    scorer: &dyn PairScorer,
    cfg: &CrossEncoderTrainConfig,
) -> Result<(Arc<dyn PairScorer>, RetrievalTrainLog)> {
    if pairs.is_empty() {
        return Err(RetrievalError::EmptyTrainingSet);
    }
    if cfg.batch_size == 0 {
        return Err(RetrievalError::Config("batch_size must be at least 1".into()));
    }
    let model = scorer.fork()?;
    let total = cfg.epochs * pairs.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::with_ratio(cfg.learning_rate, cfg.warmup_ratio, total);
    let mut opt = ScheduledAdamW::new(model.trainable_vars(), schedule, cfg.weight_decay, None)?;
    let log = run_epochs(pairs.len(), cfg.batch_size, cfg.epochs, cfg.seed, &mut opt, |idx| {
        let batch: Vec<&TrainingPair> = idx.iter().map(|&i| &pairs[i]).collect();
        cross_encoder_batch_loss(model.as_ref(), &batch)
    })?;
    Ok((model, log))
}
