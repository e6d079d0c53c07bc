use serde::{Deserialize, Serialize};

use super::{GenerationError, Result};
use crate::backends::tokenize::GenTokenizer;
use crate::backends::TokenSeq;

pub const DEFAULT_MAX_INPUT_TOKENS: usize = 330;

/// `<context> c1 … <context> cn <question> q <answer>`, each token tagged
/// with the marker id of its segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptLayout {
    pub max_input_tokens: usize,
}

impl Default for PromptLayout {
    fn default() -> Self {
        Self {
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub tokens: TokenSeq,
    /// Indices of the contexts whose marker made it into the prompt.
    pub contexts_kept: Vec<usize>,
    /// Context content tokens dropped to meet the budget.
    pub truncated_tokens: usize,
}

/// Builds the prompt. Over budget, context tokens are cut from the end of
/// the last context backwards; the question is never cut.
pub fn assemble_prompt(
    question: &str,
    contexts: &[&str],
    layout: &PromptLayout,
    tokenizer: &GenTokenizer,
) -> Result<AssembledPrompt> {
    if question.trim().is_empty() {
        return Err(GenerationError::EmptyQuestion);
    }
    let sp = *tokenizer.specials();
    let q = tokenizer.encode(question)?;
    let fixed = q.len() + 2;
    if fixed > layout.max_input_tokens {
        return Err(GenerationError::QuestionTooLong {
            len: fixed,
            budget: layout.max_input_tokens,
        });
    }
    let mut room = layout.max_input_tokens - fixed;
    let mut tokens = TokenSeq::default();
    let mut contexts_kept = Vec::new();
    let mut truncated_tokens = 0;
    for (i, c) in contexts.iter().enumerate() {
        let ids = tokenizer.encode(c)?;
        if room == 0 {
            truncated_tokens += ids.len();
            continue;
        }
        tokens.push(sp.context, sp.context);
        room -= 1;
        contexts_kept.push(i);
        let take = ids.len().min(room);
        truncated_tokens += ids.len() - take;
        for id in &ids[..take] {
            tokens.push(*id, sp.context);
        }
        room -= take;
    }
    tokens.push(sp.question, sp.question);
    for id in q {
        tokens.push(id, sp.question);
    }
    tokens.push(sp.answer, sp.answer);
    Ok(AssembledPrompt {
        tokens,
        contexts_kept,
        truncated_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> GenTokenizer {
        GenTokenizer::bytes()
    }

    #[test]
    fn empty_contexts_give_question_segment_only() {
        let t = tok();
        let sp = *t.specials();
        let p = assemble_prompt("why?", &[], &PromptLayout::default(), &t).unwrap();
        assert_eq!(p.tokens.ids.len(), 6);
        assert_eq!(p.tokens.ids[0], sp.question);
        assert_eq!(*p.tokens.ids.last().unwrap(), sp.answer);
        assert!(p.tokens.segments[..5].iter().all(|s| *s == sp.question));
    }

    #[test]
    fn long_contexts_fill_budget_exactly() {
        let t = tok();
        let sp = *t.specials();
        let question = "q".repeat(20);
        let c1 = "a".repeat(600);
        let c2 = "b".repeat(400);
        let p = assemble_prompt(&question, &[&c1, &c2], &PromptLayout::default(), &t).unwrap();
        assert_eq!(p.tokens.len(), 330);
        // The first context absorbs the whole budget; the second is dropped.
        assert_eq!(p.contexts_kept, [0]);
        assert_eq!(p.truncated_tokens, 1000 - (330 - 22 - 1));
        let q: Vec<u32> = p
            .tokens
            .ids
            .iter()
            .zip(&p.tokens.segments)
            .filter(|(id, s)| **s == sp.question && **id != sp.question)
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(q, t.encode(&question).unwrap());
    }

    #[test]
    fn last_context_is_cut_first() {
        let t = tok();
        let layout = PromptLayout { max_input_tokens: 20 };
        // fixed = 1 + 2 = 3; room 17: ctx0 takes 1 + 5, ctx1 gets 1 + 10 of 30.
        let p = assemble_prompt("x", &["aaaaa", &"b".repeat(30)], &layout, &t).unwrap();
        assert_eq!(p.tokens.len(), 20);
        assert_eq!(p.contexts_kept, [0, 1]);
        assert_eq!(p.truncated_tokens, 20);
        assert_eq!(&p.tokens.ids[1..6], t.encode("aaaaa").unwrap().as_slice());
    }

    #[test]
    fn question_over_budget_is_an_error() {
        let t = tok();
        let layout = PromptLayout { max_input_tokens: 5 };
        assert!(matches!(
            assemble_prompt("four", &[], &layout, &t),
            Err(GenerationError::QuestionTooLong { len: 6, budget: 5 })
        ));
        assert!(matches!(assemble_prompt("  ", &[], &layout, &t), Err(GenerationError::EmptyQuestion)));
    }
}
