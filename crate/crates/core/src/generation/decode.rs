use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_prompt, GenerationError, PromptLayout, Result};
use crate::backends::{BackendError, DecodingConfig, LanguageModel, TokenSeq};

/// A grounding passage handed to the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grounding {
    pub id: String,
    pub text: String,
}

impl Grounding {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    /// Generated tokens, end-of-sequence excluded.
    pub token_count: usize,
    pub decoding: DecodingConfig,
    /// Ids of the contexts that made it into the prompt.
    pub contexts_used: Vec<String>,
}

/// Next-token probabilities after top-k, temperature, softmax and top-p,
/// in that order. Filtered tokens get exactly 0.
pub fn next_token_distribution(logits: &[f32], cfg: &DecodingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut z: Vec<f64> = logits
        .iter()
        .map(|&l| if l.is_nan() { f64::NEG_INFINITY } else { f64::from(l) })
        .collect();
    if !z.iter().any(|v| v.is_finite() || *v == f64::INFINITY) {
        return Err(GenerationError::NoFiniteLogits);
    }
    if cfg.top_k > 0 && cfg.top_k < z.len() {
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        for &i in &order[cfg.top_k..] {
            z[i] = f64::NEG_INFINITY;
        }
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = if max == f64::INFINITY {
        // Infinite logits dominate: uniform over them.
        z.iter().map(|&v| if v == f64::INFINITY { 1.0 } else { 0.0 }).collect()
    } else {
        z.iter()
            .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { ((v - max) / cfg.temperature).exp() })
            .collect()
    };
    normalize(&mut probs);
    if cfg.top_p > 0.0 {
        let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            mass += probs[i];
            if mass >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            probs[i] = 0.0;
        }
        normalize(&mut probs);
    }
    Ok(probs)
}

fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
}

pub fn sample_next_token<R: Rng + ?Sized>(logits: &[f32], cfg: &DecodingConfig, rng: &mut R) -> Result<u32> {
    let probs = next_token_distribution(logits, cfg)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok(last as u32)
}

/// Decodes after `prompt` until end-of-sequence, `max_new_tokens`, or the
/// model's context window is full. The returned ids exclude end-of-sequence.
pub fn generate_tokens(lm: &dyn LanguageModel, prompt: &TokenSeq, cfg: &DecodingConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let max_ctx = lm.spec().max_context_tokens;
    if prompt.is_empty() {
        return Err(GenerationError::Config("empty prompt".into()));
    }
    if prompt.len() > max_ctx {
        return Err(BackendError::InputTooLong {
            len: prompt.len(),
            max: max_ctx,
        }
        .into());
    }
    let mut out = Vec::new();
    if cfg.max_new_tokens == 0 {
        return Ok(out);
    }
    let sp = *lm.tokenizer().specials();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut session = lm.session();
    let mut logits = session.feed(&prompt.ids, &prompt.segments)?;
    loop {
        let next = sample_next_token(&logits, cfg, &mut rng)?;
        if next == sp.eos {
            break;
        }
        out.push(next);
        if out.len() >= cfg.max_new_tokens || prompt.len() + out.len() >= max_ctx {
            break;
        }
        logits = session.feed(&[next], &[sp.answer])?;
    }
    Ok(out)
}

pub fn generate_response(
    lm: &dyn LanguageModel,
    question: &str,
    contexts: &[Grounding],
    decoding: &DecodingConfig,
    layout: &PromptLayout,
) -> Result<GeneratedResponse> {
    let texts: Vec<&str> = contexts.iter().map(|c| c.text.as_str()).collect();
    let prompt = assemble_prompt(question, &texts, layout, lm.tokenizer())?;
    let ids = generate_tokens(lm, &prompt.tokens, decoding)?;
    Ok(GeneratedResponse {
        text: lm.tokenizer().decode(&ids)?.trim().to_string(),
        token_count: ids.len(),
        decoding: decoding.clone(),
        contexts_used: prompt.contexts_kept.iter().map(|&i| contexts[i].id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::ScriptedLm;

    fn cfg(top_k: usize, top_p: f64, temperature: f64) -> DecodingConfig {
        DecodingConfig {
            top_k,
            top_p,
            temperature,
            ..DecodingConfig::default()
        }
    }

    #[test]
    fn single_finite_logit_is_certain() {
        let l = [f32::NEG_INFINITY, 3.0, f32::NEG_INFINITY];
        assert_eq!(next_token_distribution(&l, &cfg(0, 0.0, 0.7)).unwrap(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_masked_is_an_error() {
        let l = [f32::NEG_INFINITY; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_next_token(&l, &DecodingConfig::default(), &mut rng),
            Err(GenerationError::NoFiniteLogits)
        ));
    }

    #[test]
    fn top_k_one_is_argmax() {
        let l = [0.1, 2.5, 2.4, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            assert_eq!(sample_next_token(&l, &cfg(1, 0.0, 5.0), &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn nucleus_keeps_smallest_prefix() {
        // softmax(ln[0.5, 0.3, 0.2]) with p = 0.7 keeps the first two.
        let l = [0.5f32.ln(), 0.3f32.ln(), 0.2f32.ln()];
        let p = next_token_distribution(&l, &cfg(0, 0.7, 1.0)).unwrap();
        assert!((p[0] - 0.625).abs() < 1e-6 && (p[1] - 0.375).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn scripted_generation_and_context_ids() {
        let lm = ScriptedLm::fixed("hello there");
        let ctx = [Grounding::new("p1", "some context")];
        let r = generate_response(&lm, "hi?", &ctx, &DecodingConfig::default(), &PromptLayout::default()).unwrap();
        assert_eq!(r.text, "hello there");
        assert_eq!(r.token_count, 11);
        assert_eq!(r.contexts_used, ["p1"]);
        let short = DecodingConfig {
            max_new_tokens: 4,
            ..DecodingConfig::default()
        };
        let r = generate_response(&lm, "hi?", &ctx, &short, &PromptLayout::default()).unwrap();
        assert_eq!((r.text.as_str(), r.token_count), ("hell", 4));
        let none = DecodingConfig {
            max_new_tokens: 0,
            ..DecodingConfig::default()
        };
        assert_eq!(generate_response(&lm, "hi?", &ctx, &none, &PromptLayout::default()).unwrap().text, "");
    }
}
