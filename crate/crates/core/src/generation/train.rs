//! Multi-task generator fine-tuning: next-token loss on the answer plus a
//! discrimination head choosing the gold answer among distractors.

use std::collections::HashSet;
use std::sync::Arc;

use candle_core::{IndexOp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_prompt, GenerationError, PromptLayout, QARecord, Result};
use crate::backends::tokenize::GenTokenizer;
use crate::backends::{LanguageModel, TokenSeq};
use crate::train::{cross_entropy, shuffled_batches, GradAccumulator, LinearSchedule, ScheduledAdamW};
use crate::util::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenTrainConfig {
    pub lm_coef: f64,
    pub mc_coef: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub grad_accum: usize,
    pub num_distractors: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub layout: PromptLayout,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            lm_coef: 10.0,
            mc_coef: 1.0,
            grad_clip: 10.0,
            epochs: 5,
            lr: 5e-5,
            batch: 1,
            grad_accum: 8,
            num_distractors: 1,
            weight_decay: 0.0,
            seed: 0,
            layout: PromptLayout::default(),
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GenerationError::Config(m));
        if !(self.lm_coef >= 0.0 && self.mc_coef >= 0.0) {
            return bad(format!("loss coefficients must be non-negative, got {} and {}", self.lm_coef, self.mc_coef));
        }
        if self.grad_accum == 0 || self.batch == 0 {
            return bad("batch and grad_accum must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// One record framed as a choice between its answer and distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCInstance {
    pub question: String,
    pub contexts: Vec<String>,
    pub candidates: Vec<String>,
    pub gold_index: usize,
}

/// Distractors are answers of other records drawn uniformly without
/// replacement (distinct strings, never the gold answer); the gold answer
/// lands at a seeded position.
pub fn build_mc_instance(record: &QARecord, corpus: &[QARecord], num_distractors: usize, seed: u64) -> Result<MCInstance> {
    record.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&str> = Vec::with_capacity(num_distractors);
    let usable = |a: &str, chosen: &[&str]| a != record.answer && !chosen.contains(&a);
    if num_distractors > 0 && !corpus.is_empty() {
        for _ in 0..64 * num_distractors {
            if chosen.len() == num_distractors {
                break;
            }
            let a = corpus[rng.random_range(0..corpus.len())].answer.as_str();
            if usable(a, &chosen) {
                chosen.push(a);
            }
        }
    }
    if chosen.len() < num_distractors {
        // Rejection sampling stalled: draw from the explicit pool.
        let mut seen = HashSet::new();
        let pool: Vec<&str> = corpus
            .iter()
            .map(|r| r.answer.as_str())
            .filter(|a| *a != record.answer && seen.insert(*a))
            .collect();
        if pool.len() < num_distractors {
            return Err(GenerationError::CorpusTooSmall {
                needed: num_distractors,
                available: pool.len(),
            });
        }
        chosen = rand::seq::index::sample(&mut rng, pool.len(), num_distractors)
            .into_iter()
            .map(|i| pool[i])
            .collect();
    }
    let gold_index = rng.random_range(0..=num_distractors);
    let mut candidates: Vec<String> = chosen.into_iter().map(str::to_string).collect();
    candidates.insert(gold_index, record.answer.clone());
    Ok(MCInstance {
        question: record.question.clone(),
        contexts: record.context_passages.clone(),
        candidates,
        gold_index,
    })
}

/// Tokenized candidates: `prompt + answer + <eos>`, all sharing the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMc {
    pub seqs: Vec<TokenSeq>,
    /// Index of the first answer token.
    pub answer_start: usize,
    pub gold_index: usize,
}

/// Answers are cut to fit `max_context_tokens`.
pub fn encode_mc_instance(
    inst: &MCInstance,
    tokenizer: &GenTokenizer,
    layout: &PromptLayout,
    max_context_tokens: usize,
) -> Result<EncodedMc> {
    let ctx: Vec<&str> = inst.contexts.iter().map(String::as_str).collect();
    let prompt = assemble_prompt(&inst.question, &ctx, layout, tokenizer)?.tokens;
    if prompt.len() + 2 > max_context_tokens {
        return Err(GenerationError::Config(format!(
            "prompt of {} tokens leaves no room for an answer in a {max_context_tokens}-token window",
            prompt.len()
        )));
    }
    let room = max_context_tokens - prompt.len() - 1;
    let sp = *tokenizer.specials();
    let mut seqs = Vec::with_capacity(inst.candidates.len());
    for c in &inst.candidates {
        let mut s = prompt.clone();
        for id in tokenizer.encode(c)?.into_iter().take(room) {
            s.push(id, sp.answer);
        }
        s.push(sp.eos, sp.answer);
        seqs.push(s);
    }
    Ok(EncodedMc {
        seqs,
        answer_start: prompt.len(),
        gold_index: inst.gold_index,
    })
}

/// Mean next-token cross-entropy over answer positions only. Row `i` of
/// `lm_logits [b, t, V]` is scored against `seqs[i]` from
/// `answer_starts[i]` on; rows with `None` are ignored.
pub fn answer_lm_loss(lm_logits: &Tensor, seqs: &[TokenSeq], answer_starts: &[Option<usize>]) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (s, start)) in seqs.iter().zip(answer_starts).enumerate() {
        let Some(start) = *start else { continue };
        if start == 0 || start >= s.len() {
            return Err(GenerationError::Config(format!("answer start {start} outside sequence of {}", s.len())));
        }
        rows.push(lm_logits.i(i)?.narrow(0, start - 1, s.len() - start)?);
        targets.extend_from_slice(&s.ids[start..]);
    }
    if rows.is_empty() {
        return Err(GenerationError::EmptyTrainingSet);
    }
    let logits = Tensor::cat(&rows, 0)?;
    Ok(cross_entropy(&logits, &targets)?)
}

pub struct LossParts {
    /// Answer-token language-modelling loss.
    pub lm: Tensor,
    /// Candidate discrimination loss.
    pub mc: Tensor,
}

/// One forward pass over every candidate of every instance.
pub fn generator_loss_parts(lm: &dyn LanguageModel, batch: &[EncodedMc]) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(GenerationError::EmptyTrainingSet);
    }
    let n_cand = batch[0].seqs.len();
    if n_cand == 0 || batch.iter().any(|e| e.seqs.len() != n_cand) {
        return Err(GenerationError::Config("instances in a batch need the same candidate count".into()));
    }
    let mut seqs = Vec::with_capacity(batch.len() * n_cand);
    let mut starts = Vec::with_capacity(seqs.capacity());
    let mut positions = Vec::with_capacity(seqs.capacity());
    for e in batch {
        for (j, s) in e.seqs.iter().enumerate() {
            starts.push((j == e.gold_index).then_some(e.answer_start));
            positions.push(s.len() - 1);
            seqs.push(s.clone());
        }
    }
    let out = lm.forward_train(&seqs, Some(&positions))?;
    let lm_loss = answer_lm_loss(&out.lm_logits, &seqs, &starts)?;
    let mc_logits = out
        .mc_logits
        .ok_or_else(|| GenerationError::Config("model has no discrimination head".into()))?
        .reshape((batch.len(), n_cand))?;
    let gold: Vec<u32> = batch.iter().map(|e| e.gold_index as u32).collect();
    let mc_loss = cross_entropy(&mc_logits, &gold)?;
    Ok(LossParts { lm: lm_loss, mc: mc_loss })
}

/// `lm_coef·L_LM + mc_coef·L_MC`.
pub fn combine_losses(parts: &LossParts, lm_coef: f64, mc_coef: f64) -> Result<Tensor> {
    Ok(((&parts.lm * lm_coef)? + (&parts.mc * mc_coef)?)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenTrainLog {
    /// Unscaled total loss per micro-batch.
    pub step_losses: Vec<f64>,
    pub lm_losses: Vec<f64>,
    pub mc_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Optimizer updates applied.
    pub updates: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?))
}

/// Fine-tunes a copy of `lm`. Each micro-batch holds `batch` records;
/// gradients of `grad_accum` micro-batches are summed (losses pre-divided by
/// `grad_accum`) before one clipped AdamW step. The learning rate decays
/// linearly to zero.
pub fn train_generator(
    records: &[QARecord],
    lm: &dyn LanguageModel,
    cfg: &GenTrainConfig,
) -> Result<(Arc<dyn LanguageModel>, GenTrainLog)> {
    if records.is_empty() {
        return Err(GenerationError::EmptyTrainingSet);
    }
    cfg.validate()?;
    for r in records {
        r.validate()?;
    }
    let model = lm.fork()?;
    let micro_per_epoch = records.len().div_ceil(cfg.batch);
    let updates = cfg.epochs * micro_per_epoch.div_ceil(cfg.grad_accum);
    let schedule = LinearSchedule::with_ratio(cfg.lr, 0.0, updates);
    let mut opt = ScheduledAdamW::new(model.trainable_vars(), schedule, cfg.weight_decay, Some(cfg.grad_clip))?;
    let max_ctx = model.spec().max_context_tokens;
    let mut log = GenTrainLog::default();
    let mut acc = GradAccumulator::default();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(records.len(), cfg.batch, cfg.seed, epoch);
        for (bi, idx) in batches.iter().enumerate() {
            let mut encoded = Vec::with_capacity(idx.len());
            for &i in idx {
                let seed = mix(mix(cfg.seed, epoch as u64), i as u64);
                let inst = build_mc_instance(&records[i], records, cfg.num_distractors, seed)?;
                encoded.push(encode_mc_instance(&inst, model.tokenizer(), &cfg.layout, max_ctx)?);
            }
            let parts = generator_loss_parts(model.as_ref(), &encoded)?;
            let total = combine_losses(&parts, cfg.lm_coef, cfg.mc_coef)?;
            let value = scalar(&total)?;
            if !value.is_finite() {
                return Err(GenerationError::Config(format!("non-finite loss at epoch {epoch}")));
            }
            log.step_losses.push(value);
            log.lm_losses.push(scalar(&parts.lm)?);
            log.mc_losses.push(scalar(&parts.mc)?);
            sum += value;
            acc.add(&(total / cfg.grad_accum as f64)?)?;
            if acc.len() == cfg.grad_accum || bi + 1 == batches.len() {
                if let Some(mut grads) = acc.take() {
                    opt.step(&mut grads)?;
                    log.updates += 1;
                }
            }
        }
        log.epoch_losses.push(sum / batches.len() as f64);
        tracing::info!(epoch, loss = log.epoch_losses[epoch], "generator epoch finished");
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, a: &str) -> QARecord {
        QARecord {
            question: q.into(),
            answer: a.into(),
            context_passages: vec![format!("context for {q}")],
            well_formed: false,
        }
    }

    fn corpus() -> Vec<QARecord> {
        vec![rec("q1", "a1"), rec("q2", "a2"), rec("q3", "a3"), rec("q4", "a1")]
    }

    #[test]
    fn zero_distractors_single_candidate() {
        let c = corpus();
        let m = build_mc_instance(&c[0], &c, 0, 5).unwrap();
        assert_eq!(m.candidates, ["a1"]);
        assert_eq!(m.gold_index, 0);
    }

    #[test]
    fn distractors_are_distinct_and_seeded() {
        let c = corpus();
        for seed in 0..50 {
            let m = build_mc_instance(&c[0], &c, 2, seed).unwrap();
            assert_eq!(m.candidates[m.gold_index], "a1");
            let others: Vec<&String> = m.candidates.iter().filter(|x| *x != "a1").collect();
            assert_eq!(others.len(), 2);
            assert_ne!(others[0], others[1]);
            assert_eq!(m, build_mc_instance(&c[0], &c, 2, seed).unwrap());
        }
        assert!(matches!(
            build_mc_instance(&c[0], &c, 3, 0),
            Err(GenerationError::CorpusTooSmall { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn encoding_shares_prompt_and_ends_with_eos() {
        let c = corpus();
        let tok = GenTokenizer::bytes();
        let m = build_mc_instance(&c[1], &c, 1, 1).unwrap();
        let e = encode_mc_instance(&m, &tok, &PromptLayout::default(), 512).unwrap();
        assert_eq!(e.seqs.len(), 2);
        for s in &e.seqs {
            assert_eq!(s.ids[..e.answer_start], e.seqs[0].ids[..e.answer_start]);
            assert_eq!(*s.ids.last().unwrap(), tok.specials().eos);
        }
        let gold = &e.seqs[e.gold_index];
        assert_eq!(tok.decode(&gold.ids[e.answer_start..]).unwrap(), "a2");
    }

    #[test]
    fn config_validation() {
        let bad = GenTrainConfig {
            grad_accum: 0,
            ..GenTrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = GenTrainConfig {
            mc_coef: -1.0,
            ..GenTrainConfig::default()
        };
        assert!(neg.validate().is_err());
        let lm = crate::backends::stub::generator("stub:gpt2-tiny").unwrap();
        assert!(matches!(
            train_generator(&[], lm.as_ref(), &GenTrainConfig::default()),
            Err(GenerationError::EmptyTrainingSet)
        ));
    }
}
