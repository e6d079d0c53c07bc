use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IntentError, LabeledQuery, Result};
use crate::backends::Translator;
use crate::util::{fnv1a, mix, normalize_whitespace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub pivot_lang: String,
    pub source_lang: String,
    pub insertion_rate: f64,
    pub seed: u64,
    pub drop_identical: bool,
    /// Augmented examples kept per original example.
    pub mix_ratio: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            pivot_lang: "de".into(),
            source_lang: "en".into(),
            insertion_rate: 0.1,
            seed: 0,
            drop_identical: true,
            mix_ratio: 1.0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.insertion_rate) {
            return Err(IntentError::Config(format!("insertion_rate {} outside [0, 1]", self.insertion_rate)));
        }
        if !(self.mix_ratio >= 0.0 && self.mix_ratio.is_finite()) {
            return Err(IntentError::Config(format!("mix_ratio must be non-negative, got {}", self.mix_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub produced: usize,
    pub dropped_identical: usize,
    pub dropped_empty: usize,
    pub failed: usize,
}

fn round_trip(t: &dyn Translator, texts: &[&str], cfg: &AugmentationConfig) -> crate::backends::Result<Vec<String>> {
    let pivot = t.translate(texts, &cfg.source_lang, &cfg.pivot_lang)?;
    let refs: Vec<&str> = pivot.iter().map(String::as_str).collect();
    t.translate(&refs, &cfg.pivot_lang, &cfg.source_lang)
}

/// Paraphrases through the pivot language. Each output keeps its source's
/// label. Items the translator fails on are skipped and counted.
pub fn augment_back_translation(
    examples: &[LabeledQuery],
    translator: &dyn Translator,
    cfg: &AugmentationConfig,
) -> Result<(Vec<LabeledQuery>, AugmentStats)> {
    cfg.validate()?;
    let (src, pivot) = (cfg.source_lang.as_str(), cfg.pivot_lang.as_str());
    if !translator.supports(src, pivot) || !translator.supports(pivot, src) {
        return Err(crate::backends::BackendError::UnsupportedLanguagePair {
            source_lang: src.to_string(),
            target_lang: pivot.to_string(),
        }
        .into());
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let outputs: Vec<Option<String>> = match round_trip(translator, &texts, cfg) {
        Ok(v) if v.len() == texts.len() => v.into_iter().map(Some).collect(),
        _ => texts.iter().map(|t| round_trip(translator, &[t], cfg).ok().and_then(|mut v| v.pop())).collect(),
    };
    let mut stats = AugmentStats::default();
    let mut out = Vec::new();
    for (e, o) in examples.iter().zip(outputs) {
        let Some(o) = o else {
            stats.failed += 1;
            continue;
        };
        let text = normalize_whitespace(&o);
        if text.is_empty() {
            stats.dropped_empty += 1;
        } else if cfg.drop_identical && text.to_lowercase() == e.text.to_lowercase() {
            stats.dropped_identical += 1;
        } else {
            out.push(LabeledQuery {
                text,
                label_index: e.label_index,
            });
        }
    }
    if stats.failed > 0 {
        tracing::warn!(failed = stats.failed, "back-translation failures skipped");
    }
    stats.produced = out.len();
    Ok((out, stats))
}

/// Inserts `ceil(rate · n)` copies of the example's own tokens at uniform
/// positions. The RNG is seeded from `cfg.seed` and the text.
pub fn augment_insertion(example: &LabeledQuery, cfg: &AugmentationConfig) -> Result<LabeledQuery> {
    cfg.validate()?;
    let original: Vec<&str> = example.text.split_whitespace().collect();
    let n_insert = (cfg.insertion_rate * original.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, fnv1a(example.text.as_bytes())));
    let mut tokens = original.clone();
    for _ in 0..n_insert {
        let tok = *original.choose(&mut rng).expect("non-empty text");
        let pos = rng.random_range(0..=tokens.len());
        tokens.insert(pos, tok);
    }
    Ok(LabeledQuery {
        text: tokens.join(" "),
        label_index: example.label_index,
    })
}

/// Originals followed by up to `mix_ratio · |original|` augmented examples,
/// sampled under the seed.
pub fn mix_augmented(original: &[LabeledQuery], augmented: &[LabeledQuery], cfg: &AugmentationConfig) -> Result<Vec<LabeledQuery>> {
    cfg.validate()?;
    let want = ((original.len() as f64 * cfg.mix_ratio).floor() as usize).min(augmented.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xa06));
    let mut out = original.to_vec();
    out.extend(augmented.choose_multiple(&mut rng, want).cloned());
    Ok(out)
}
