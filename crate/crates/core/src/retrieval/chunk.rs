//! Rule-based sentence splitting and sentence-window passages.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{CorpusVariant, Document, Passage, Result, RetrievalError};
use crate::util::normalize_whitespace;

/// Lowercased words that take a trailing period without ending a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "e.g", "i.e", "inc", "ltd", "co", "corp", "no", "fig",
    "approx", "dept", "est", "mt", "ave", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct",
    "nov", "dec",
];

const TERMINATORS: [char; 3] = ['.', '?', '!'];
const CLOSERS: [char; 6] = ['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    /// 2, 3 and 4 give short, medium and long passages.
    pub sentences_per_passage: usize,
    pub overlap: usize,
    pub clean: bool,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            sentences_per_passage: 3,
            overlap: 0,
            clean: false,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sentences_per_passage == 0 {
            return Err(RetrievalError::Config("sentences_per_passage must be at least 1".into()));
        }
        if self.overlap >= self.sentences_per_passage {
            return Err(RetrievalError::Config(format!(
                "overlap {} must be smaller than sentences_per_passage {}",
                self.overlap, self.sentences_per_passage
            )));
        }
        Ok(())
    }
}

fn is_abbreviation(text: &str, dot: usize) -> bool {
    let word_start = text[..dot]
        .rfind(char::is_whitespace)
        .map_or(0, |p| p + text[p..].chars().next().map_or(1, char::len_utf8));
    let word = text[word_start..dot].trim_start_matches(['(', '[', '"', '\'']).to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Byte ranges of sentences. Each range is trimmed; only whitespace lies
/// between consecutive ranges.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() && !c.is_whitespace() {
            start = Some(pos);
        }
        if TERMINATORS.contains(&c) {
            let mut j = i + 1;
            while j < chars.len() && (TERMINATORS.contains(&chars[j].1) || CLOSERS.contains(&chars[j].1)) {
                j += 1;
            }
            let at_gap = j == chars.len() || chars[j].1.is_whitespace();
            let single_dot = c == '.' && (j == i + 1 || !TERMINATORS.contains(&chars[i + 1].1));
            if at_gap && !(single_dot && is_abbreviation(text, pos)) {
                let end = if j == chars.len() { text.len() } else { chars[j].0 };
                spans.push(start.take().unwrap_or(pos)..end);
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        if end > s {
            spans.push(s..end);
        }
    }
    spans
}

pub fn split_sentences(text: &str) -> Vec<String> {
    sentence_spans(text).into_iter().map(|r| text[r].to_string()).collect()
}

/// Per line: strip control characters and collapse whitespace; lines with
/// fewer than three alphabetic characters are dropped. Lines are then joined.
pub fn clean_text(text: &str) -> String {
    text.lines()
        .map(|line| normalize_whitespace(&line.chars().filter(|c| !c.is_control()).collect::<String>()))
        .filter(|line| line.chars().filter(|c| c.is_alphabetic()).count() >= 3)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Windows of `S` sentences with step `S - overlap`; a shorter final window is kept.
pub fn chunk_document(doc: &Document, cfg: &ChunkingConfig) -> Result<Vec<Passage>> {
    cfg.validate()?;
    if doc.text.trim().is_empty() {
        return Err(RetrievalError::EmptyDocument(doc.doc_id.clone()));
    }
    let (body, variant) = if cfg.clean {
        (clean_text(&doc.text), CorpusVariant::Clean)
    } else {
        (doc.text.clone(), CorpusVariant::Raw)
    };
    let sentences = split_sentences(&body);
    let n = sentences.len();
    let step = cfg.sentences_per_passage - cfg.overlap;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + cfg.sentences_per_passage).min(n);
        out.push(Passage {
            passage_id: format!("{}:{start}-{end}", doc.doc_id),
            doc_id: doc.doc_id.clone(),
            text: sentences[start..end].join(" "),
            sentence_span: (start, end),
            corpus_variant: variant,
            answer: None,
        });
        if end == n {
            break;
        }
        start += step;
    }
    Ok(out)
}
