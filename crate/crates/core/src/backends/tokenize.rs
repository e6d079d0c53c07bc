//! Tokenizers for encoders and generators.
//!
//! Encoders see either hashed word buckets (stub models) or a Hugging Face
//! `tokenizer.json` / `vocab.txt` WordPiece vocabulary. Generators see raw
//! bytes (stub models) or a byte-level BPE `tokenizer.json`, extended with
//! the segment marker tokens used by prompt assembly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tokenizers::models::wordpiece::WordPiece;
use tokenizers::normalizers::bert::BertNormalizer;
use tokenizers::pre_tokenizers::bert::BertPreTokenizer;
use tokenizers::{AddedToken, Tokenizer};

use super::{BackendError, Result};
use crate::util::{fnv1a, word_tokens};

/// Reserved ids of the hashed word vocabulary.
const HASH_PAD: u32 = 0;
const HASH_CLS: u32 = 1;
const HASH_SEP: u32 = 2;
const HASH_FIRST_WORD: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TokenizerKind {
    /// Lowercased words hashed into `buckets` ids (plus 3 reserved ids).
    HashedWords { buckets: u32 },
    /// `tokenizer.json` (or `vocab.txt`) next to the weights.
    HuggingFace,
    /// UTF-8 bytes plus six marker tokens.
    Bytes,
}

/// Sequence-level tokenizer for BERT-style encoders: `[CLS] a [SEP] (b [SEP])`.
pub struct EncoderTokenizer {
    kind: TokenizerKind,
    hf: Option<Tokenizer>,
    cls: u32,
    sep: u32,
    pad: u32,
}

/// Encoded input with segment (token type) ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
}

impl EncoderTokenizer {
    pub fn hashed(buckets: u32) -> Self {
        Self {
            kind: TokenizerKind::HashedWords { buckets },
            hf: None,
            cls: HASH_CLS,
            sep: HASH_SEP,
            pad: HASH_PAD,
        }
    }

    /// Loads `tokenizer.json`, falling back to a lowercasing WordPiece over `vocab.txt`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let tok = load_hf_tokenizer(dir)?;
        let id = |name: &str| {
            tok.token_to_id(name).ok_or_else(|| {
                BackendError::Format(format!("tokenizer in {} lacks {name}", dir.display()))
            })
        };
        let cls = id("[CLS]")?;
        let sep = id("[SEP]")?;
        let pad = tok.token_to_id("[PAD]").unwrap_or(0);
        Ok(Self {
            kind: TokenizerKind::HuggingFace,
            hf: Some(tok),
            cls,
            sep,
            pad,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn vocab_size(&self) -> usize {
        match (&self.kind, &self.hf) {
            (TokenizerKind::HashedWords { buckets }, _) => (*buckets + HASH_FIRST_WORD) as usize,
            (_, Some(t)) => t.get_vocab_size(true),
            _ => 0,
        }
    }

    fn pieces(&self, text: &str) -> Result<Vec<u32>> {
        match (&self.kind, &self.hf) {
            (TokenizerKind::HashedWords { buckets }, _) => Ok(word_tokens(text)
                .iter()
                .map(|w| HASH_FIRST_WORD + (fnv1a(w.as_bytes()) % u64::from(*buckets)) as u32)
                .collect()),
            (_, Some(t)) => t
                .encode(text, false)
                .map(|e| e.get_ids().to_vec())
                .map_err(|e| BackendError::Format(e.to_string())),
            _ => Err(BackendError::Format("encoder tokenizer not initialised".into())),
        }
    }

    /// `[CLS] text [SEP]`, truncated to `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Encoded> {
        let mut body = self.pieces(text)?;
        body.truncate(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.cls);
        ids.extend(body);
        ids.push(self.sep);
        let type_ids = vec![0; ids.len()];
        Ok(Encoded { ids, type_ids })
    }

    /// `[CLS] a [SEP] b [SEP]`, trimming the longer side first until it fits.
    pub fn encode_pair(&self, a: &str, b: &str, max_len: usize) -> Result<Encoded> {
        let mut a = self.pieces(a)?;
        let mut b = self.pieces(b)?;
        let budget = max_len.saturating_sub(3);
        while a.len() + b.len() > budget {
            if a.len() > b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
        ids.push(self.cls);
        ids.extend(&a);
        ids.push(self.sep);
        let first = ids.len();
        ids.extend(&b);
        ids.push(self.sep);
        let mut type_ids = vec![0; first];
        type_ids.resize(ids.len(), 1);
        Ok(Encoded { ids, type_ids })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if let Some(t) = &self.hf {
            t.save(dir.join("tokenizer.json"), false)
                .map_err(|e| BackendError::Format(e.to_string()))?;
        }
        Ok(())
    }
}

fn load_hf_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let json = dir.join("tokenizer.json");
    if json.exists() {
        return Tokenizer::from_file(&json).map_err(|e| BackendError::Format(e.to_string()));
    }
    let vocab = dir.join("vocab.txt");
    if vocab.exists() {
        let lowercase = read_do_lower_case(dir).unwrap_or(true);
        let wp = WordPiece::from_file(&vocab.display().to_string())
            .unk_token("[UNK]".into())
            .build()
            .map_err(|e| BackendError::Format(e.to_string()))?;
        let mut tok = Tokenizer::new(wp);
        tok.with_normalizer(Some(BertNormalizer::new(true, true, None, lowercase)))
            .map_err(|e| BackendError::Format(e.to_string()))?;
        tok.with_pre_tokenizer(Some(BertPreTokenizer));
        return Ok(tok);
    }
    Err(BackendError::Format(format!(
        "no tokenizer.json or vocab.txt in {}",
        dir.display()
    )))
}

fn read_do_lower_case(dir: &Path) -> Option<bool> {
    let raw = std::fs::read(dir.join("tokenizer_config.json")).ok()?;
    let v: serde_json::Value = serde_json::from_slice(&raw).ok()?;
    v.get("do_lower_case")?.as_bool()
}

/// Marker and control tokens of a generator vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    pub context: u32,
    pub question: u32,
    pub answer: u32,
}

impl SpecialTokens {
    fn contains(&self, id: u32) -> bool {
        [self.bos, self.eos, self.pad, self.context, self.question, self.answer].contains(&id)
    }
}

pub const SPECIAL_TOKEN_NAMES: [&str; 6] = [
    "<bos>",
    "<eos>",
    "<pad>",
    "<context>",
    "<question>",
    "<answer>",
];

/// Tokenizer for generators.
pub struct GenTokenizer {
    hf: Option<Tokenizer>,
    specials: SpecialTokens,
    vocab_size: usize,
}

impl GenTokenizer {
    /// 256 byte ids followed by the six markers.
    pub fn bytes() -> Self {
        Self {
            hf: None,
            specials: SpecialTokens {
                bos: 256,
                eos: 257,
                pad: 258,
                context: 259,
                question: 260,
                answer: 261,
            },
            vocab_size: 262,
        }
    }

    /// Loads `tokenizer.json`, registering any missing marker tokens.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut tok = load_hf_tokenizer(dir)?;
        let missing: Vec<AddedToken> = SPECIAL_TOKEN_NAMES
            .iter()
            .filter(|n| tok.token_to_id(n).is_none())
            .map(|n| AddedToken::from(n.to_string(), true))
            .collect();
        if !missing.is_empty() {
            tok.add_special_tokens(missing)
                .map_err(|e| BackendError::Format(e.to_string()))?;
        }
        let id = |n: &str| tok.token_to_id(n).expect("registered above");
        let specials = SpecialTokens {
            bos: id("<bos>"),
            eos: id("<eos>"),
            pad: id("<pad>"),
            context: id("<context>"),
            question: id("<question>"),
            answer: id("<answer>"),
        };
        let vocab_size = tok.get_vocab_size(true);
        Ok(Self {
            hf: Some(tok),
            specials,
            vocab_size,
        })
    }

    pub fn is_bytes(&self) -> bool {
        self.hf.is_none()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match &self.hf {
            None => Ok(text.bytes().map(u32::from).collect()),
            Some(t) => t
                .encode(text, false)
                .map(|e| e.get_ids().to_vec())
                .map_err(|e| BackendError::Format(e.to_string())),
        }
    }

    /// Decodes, dropping marker tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let kept: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|id| !self.specials.contains(*id))
            .collect();
        match &self.hf {
            None => {
                let bytes: Vec<u8> = kept.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Some(t) => t
                .decode(&kept, true)
                .map_err(|e| BackendError::Format(e.to_string())),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if let Some(t) = &self.hf {
            t.save(dir.join("tokenizer.json"), false)
                .map_err(|e| BackendError::Format(e.to_string()))?;
        }
        Ok(())
    }
}
