use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IntentClassifier, IntentError, IntentLabelSet, LabeledQuery, Result};
use crate::backends::nn::device;
use crate::backends::{EncodeMode, TextEncoder};
use crate::evaluation::macro_f1;
use crate::train::{cross_entropy, shuffled_batches, LinearSchedule, ScheduledAdamW, Snapshot};
use crate::util::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub weight_decay: f64,
    /// Train the head only.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for IntentTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_ratio: 0.2,
            validation_fraction: 0.05,
            patience: 2,
            weight_decay: 0.01,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    pub validation_macro_f1: Vec<f64>,
    /// 0-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopping_reason: StopReason,
    pub train_size: usize,
    pub validation_size: usize,
}

impl TrainReport {
    /// Macro-F1 on the validation split at the kept epoch.
    pub fn best_validation_f1(&self) -> Option<f64> {
        self.validation_macro_f1.get(self.best_epoch).copied()
    }
}

fn check_examples(examples: &[LabeledQuery], n: usize) -> Result<()> {
    if examples.is_empty() {
        return Err(IntentError::EmptyTrainingSet(String::new()));
    }
    if let Some(e) = examples.iter().find(|e| e.label_index >= n) {
        return Err(IntentError::LabelOutOfRange { index: e.label_index, n });
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.to_scalar::<f32>()?))
}

/// Loss and macro-F1 of `clf` on `examples`, without gradients.
fn evaluate(clf: &IntentClassifier, examples: &[LabeledQuery], features: Option<&Tensor>) -> Result<(f64, f64)> {
    let mut logits = Vec::new();
    for (c, chunk) in examples.chunks(64).enumerate() {
        let l = match features {
            Some(f) => clf.head_logits(&f.narrow(0, c * 64, chunk.len())?)?,
            None => {
                let texts: Vec<&str> = chunk.iter().map(|e| e.text.as_str()).collect();
                clf.logits(&texts)?
            }
        };
        logits.push(l.detach());
    }
    let logits = Tensor::cat(&logits, 0)?;
    let gold: Vec<u32> = examples.iter().map(|e| e.label_index as u32).collect();
    let loss = scalar(&cross_entropy(&logits, &gold)?)?;
    let pred: Vec<usize> = logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|p| p as usize).collect();
    let gold: Vec<usize> = examples.iter().map(|e| e.label_index).collect();
    Ok((loss, macro_f1(&gold, &pred).map_err(|e| IntentError::Config(e.to_string()))?))
}

fn embed(encoder: &dyn TextEncoder, examples: &[LabeledQuery]) -> Result<Tensor> {
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let m = encoder.encode(&texts, EncodeMode::Query)?;
    let (n, d) = m.dim();
    Ok(Tensor::from_vec(m.into_raw_vec_and_offset().0, (n, d), &device())?)
}

/// Fine-tunes a copy of `encoder` with a fresh linear head. A seeded
/// `validation_fraction` split drives early stopping on validation loss;
/// the best epoch's weights are restored.
pub fn train_intent_classifier(
    examples: &[LabeledQuery],
    labels: IntentLabelSet,
    encoder: &dyn TextEncoder,
    cfg: &IntentTrainConfig,
) -> Result<(IntentClassifier, TrainReport)> {
    check_examples(examples, labels.len())?;
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(IntentError::Config("batch_size ≥ 1 and validation_fraction in [0, 1) required".into()));
    }
    let mut shuffled = examples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5eed)));
    let n_val = ((examples.len() as f64 * cfg.validation_fraction).round() as usize).min(examples.len() - 1);
    let validation = shuffled.split_off(examples.len() - n_val);
    let train = shuffled;

    let frozen = cfg.freeze_encoder || encoder.trainable_vars().is_empty();
    let enc: Arc<dyn TextEncoder> = encoder.fork()?;
    let clf = IntentClassifier::seeded(enc.clone(), labels, cfg.seed)?;
    let mut vars: Vec<Var> = clf.head_vars();
    if !frozen {
        vars.extend(enc.trainable_vars());
    }
    // Frozen encoders are run once up front.
    let train_features = if frozen { Some(embed(enc.as_ref(), &train)?) } else { None };
    let val_features = if frozen && !validation.is_empty() {
        Some(embed(enc.as_ref(), &validation)?)
    } else {
        None
    };

    let steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::with_ratio(cfg.learning_rate, cfg.warmup_ratio, steps);
    let mut opt = ScheduledAdamW::new(vars.clone(), schedule, cfg.weight_decay, None)?;
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        validation_losses: Vec::new(),
        validation_macro_f1: Vec::new(),
        best_epoch: 0,
        stopping_reason: StopReason::MaxEpochs,
        train_size: train.len(),
        validation_size: validation.len(),
    };
    let mut best: Option<(f64, Snapshot)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let logits = match &train_features {
                Some(f) => {
                    let rows = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect(), idx.len(), &device())?;
                    clf.head_logits(&f.index_select(&rows, 0)?)?
                }
                None => {
                    let texts: Vec<&str> = idx.iter().map(|&i| train[i].text.as_str()).collect();
                    clf.logits(&texts)?
                }
            };
            let gold: Vec<u32> = idx.iter().map(|&i| train[i].label_index as u32).collect();
            let loss = cross_entropy(&logits, &gold)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(IntentError::Config(format!("non-finite loss at epoch {epoch}")));
            }
            sum += value;
            opt.step(&mut loss.backward()?)?;
        }
        report.epoch_losses.push(sum / batches.len() as f64);
        let (val_loss, val_f1) = if validation.is_empty() {
            (report.epoch_losses[epoch], f64::NAN)
        } else {
            evaluate(&clf, &validation, val_features.as_ref())?
        };
        report.validation_losses.push(val_loss);
        report.validation_macro_f1.push(val_f1);
        tracing::info!(epoch, train_loss = report.epoch_losses[epoch], val_loss, val_f1, "intent epoch");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, Snapshot::capture(&vars)?));
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if !validation.is_empty() && stale >= cfg.patience {
                report.stopping_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        snap.restore(&vars)?;
    }
    Ok((clf, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 6,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a fresh head over `labels` on top of `base`'s encoder, which is
/// shared and never updated.
pub fn few_shot_adapt(
    base: &IntentClassifier,
    labels: IntentLabelSet,
    support: &[LabeledQuery],
    cfg: &FewShotConfig,
) -> Result<IntentClassifier> {
    check_examples(support, labels.len())?;
    let mut counts = vec![0usize; labels.len()];
    for e in support {
        counts[e.label_index] += 1;
    }
    if let Some(i) = counts.iter().position(|c| *c == 0) {
        return Err(IntentError::EmptyTrainingSet(format!(
            " for class `{}`",
            labels.name(i).unwrap_or_default()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(IntentError::Config("batch_size must be at least 1".into()));
    }
    let encoder = base.encoder().clone();
    let clf = IntentClassifier::seeded(encoder.clone(), labels, cfg.seed)?;
    let features = embed(encoder.as_ref(), support)?;
    let mut opt = ScheduledAdamW::new(clf.head_vars(), LinearSchedule::constant(cfg.learning_rate), 0.0, None)?;
    for epoch in 0..cfg.epochs {
        for idx in shuffled_batches(support.len(), cfg.batch_size, cfg.seed, epoch) {
            let rows = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect(), idx.len(), &device())?;
            let logits = clf.head_logits(&features.index_select(&rows, 0)?)?;
            let gold: Vec<u32> = idx.iter().map(|&i| support[i].label_index as u32).collect();
            opt.step(&mut cross_entropy(&logits, &gold)?.backward()?)?;
        }
    }
    Ok(clf)
}

/// `k` examples per label drawn from `pool` under `seed`.
pub fn sample_support_set(pool: &[LabeledQuery], n_labels: usize, k: usize, seed: u64) -> Result<Vec<LabeledQuery>> {
    if k == 0 {
        return Err(IntentError::Config("k must be at least 1".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<&LabeledQuery>> = BTreeMap::new();
    for e in pool {
        by_label.entry(e.label_index).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_labels * k);
    for label in 0..n_labels {
        let items = by_label.get(&label).map(Vec::as_slice).unwrap_or_default();
        if items.len() < k {
            return Err(IntentError::EmptyTrainingSet(format!(
                ": label {label} has {} examples, {k} requested",
                items.len()
            )));
        }
        out.extend(items.choose_multiple(&mut rng, k).map(|e| (*e).clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub;
    use crate::intent::IntentModel;

    fn labels(n: usize) -> IntentLabelSet {
        IntentLabelSet::new((0..n).map(|i| format!("l{i}")).collect()).unwrap()
    }

    fn q(t: &str, l: usize) -> LabeledQuery {
        LabeledQuery::new(t, l).unwrap()
    }

    #[test]
    fn empty_and_out_of_range() {
        let enc = stub::encoder("stub:hash").unwrap();
        let cfg = IntentTrainConfig::default();
        assert!(matches!(
            train_intent_classifier(&[], labels(2), enc.as_ref(), &cfg),
            Err(IntentError::EmptyTrainingSet(_))
        ));
        assert!(matches!(
            train_intent_classifier(&[q("a", 5)], labels(2), enc.as_ref(), &cfg),
            Err(IntentError::LabelOutOfRange { index: 5, n: 2 })
        ));
    }

    #[test]
    fn few_shot_needs_every_class() {
        let enc = stub::encoder("stub:hash").unwrap();
        let base = IntentClassifier::seeded(enc, labels(2), 0).unwrap();
        let r = few_shot_adapt(&base, labels(3), &[q("a", 0), q("b", 1)], &FewShotConfig::default());
        assert!(matches!(r, Err(IntentError::EmptyTrainingSet(_))));
    }

    #[test]
    fn support_sampling_is_seeded() {
        let pool: Vec<_> = (0..20).map(|i| q(&format!("t{i}"), i % 2)).collect();
        let a = sample_support_set(&pool, 2, 3, 1).unwrap();
        assert_eq!(a, sample_support_set(&pool, 2, 3, 1).unwrap());
        assert_eq!(a.len(), 6);
        assert!(sample_support_set(&pool, 3, 1, 1).is_err());
    }

    #[test]
    fn head_only_training_fits_separable_toy() {
        let enc = stub::encoder("stub:hash").unwrap();
        let ex: Vec<_> = (0..10)
            .flat_map(|i| [q(&format!("card payment {i}"), 0), q(&format!("weather forecast {i}"), 1)])
            .collect();
        let cfg = IntentTrainConfig {
            learning_rate: 5e-2,
            ..IntentTrainConfig::default()
        };
        let (clf, rep) = train_intent_classifier(&ex, labels(2), enc.as_ref(), &cfg).unwrap();
        assert_eq!(rep.validation_size, 1);
        assert!(rep.best_epoch < rep.epoch_losses.len());
        let texts: Vec<&str> = ex.iter().map(|e| e.text.as_str()).collect();
        let preds = clf.predict_batch(&texts).unwrap();
        assert!(preds.iter().zip(&ex).all(|(p, e)| p.top_index == e.label_index));
    }
}
