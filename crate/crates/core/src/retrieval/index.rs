//! Exact dense index. Persisted as `manifest.json`, `ids.json`,
//! `passages.jsonl` and `vectors.f32` (row-major little-endian f32).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::{Passage, RankedContext, Result, RetrievalError};
use crate::backends::{EncodeMode, TextEncoder};
use crate::util::{read_jsonl, write_jsonl};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    encoder_checkpoint: String,
    similarity: Similarity,
    count: usize,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    passages: Vec<Passage>,
    vectors: Array2<f32>,
    encoder_checkpoint: String,
    similarity: Similarity,
}

fn l2_normalize_rows(m: &mut Array2<f32>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
}

/// Embeds every passage in passage mode. Cosine indexes store unit rows.
pub fn build_index(passages: Vec<Passage>, encoder: &dyn TextEncoder, similarity: Similarity) -> Result<EmbeddingIndex> {
    let mut seen = HashSet::new();
    if let Some(dup) = passages.iter().find(|p| !seen.insert(p.passage_id.as_str())) {
        return Err(RetrievalError::DuplicateId(dup.passage_id.clone()));
    }
    let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
    let mut vectors = encoder.encode(&texts, EncodeMode::Passage)?;
    if similarity == Similarity::Cosine {
        l2_normalize_rows(&mut vectors);
    }
    EmbeddingIndex::from_parts(passages, vectors, encoder.spec().checkpoint_name.clone(), similarity)
}

impl EmbeddingIndex {
    pub fn from_parts(
        passages: Vec<Passage>,
        vectors: Array2<f32>,
        encoder_checkpoint: String,
        similarity: Similarity,
    ) -> Result<Self> {
        if vectors.nrows() != passages.len() {
            return Err(RetrievalError::Format(format!(
                "{} vectors for {} passages",
                vectors.nrows(),
                passages.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Format("index contains non-finite values".into()));
        }
        Ok(Self {
            passages,
            vectors,
            encoder_checkpoint,
            similarity,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.passages.iter().map(|p| p.passage_id.as_str())
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn encoder_checkpoint(&self) -> &str {
        &self.encoder_checkpoint
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    /// Exact top-k by score, descending; ties go to the smaller passage id.
    pub fn search(&self, query: ArrayView1<f32>, k: usize) -> Result<Vec<RankedContext>> {
        if k == 0 {
            return Err(RetrievalError::Config("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let mut q = query.to_owned();
        if self.similarity == Similarity::Cosine {
            let n = q.dot(&q).sqrt();
            if n > 0.0 {
                q.mapv_inplace(|x| x / n);
            }
        }
        let scores = self.vectors.dot(&q);
        let order = |a: &usize, b: &usize| -> Ordering {
            scores[*b]
                .total_cmp(&scores[*a])
                .then_with(|| self.passages[*a].passage_id.cmp(&self.passages[*b].passage_id))
        };
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let k = k.min(idx.len());
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_by(order);
        Ok(idx
            .into_iter()
            .enumerate()
            .map(|(r, i)| RankedContext {
                passage: self.passages[i].clone(),
                retriever_score: scores[i],
                reranker_score: None,
                rank: r + 1,
            })
            .collect())
    }

    /// Encodes `query` in query mode and searches.
    pub fn retrieve(&self, query: &str, encoder: &dyn TextEncoder, k: usize) -> Result<Vec<RankedContext>> {
        if k == 0 {
            return Err(RetrievalError::Config("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = encoder.encode(&[query], EncodeMode::Query)?;
        self.search(q.row(0), k)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            encoder_checkpoint: self.encoder_checkpoint.clone(),
            similarity: self.similarity,
            count: self.len(),
            dim: self.dim(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("manifest serialises"))?;
        let ids: Vec<&str> = self.passage_ids().collect();
        std::fs::write(dir.join("ids.json"), serde_json::to_vec(&ids).expect("ids serialise"))?;
        write_jsonl(&dir.join("passages.jsonl"), &self.passages)?;
        let mut bytes = Vec::with_capacity(self.vectors.len() * 4);
        for v in self.vectors.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join("vectors.f32"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
            .map_err(|e| RetrievalError::Format(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(RetrievalError::Format(format!(
                "unsupported index format version {}",
                manifest.format_version
            )));
        }
        let ids: Vec<String> = serde_json::from_slice(&std::fs::read(dir.join("ids.json"))?)
            .map_err(|e| RetrievalError::Format(format!("ids: {e}")))?;
        let passages: Vec<Passage> = read_jsonl(&dir.join("passages.jsonl"))?;
        let bytes = std::fs::read(dir.join("vectors.f32"))?;
        let (n, d) = (manifest.count, manifest.dim);
        if ids.len() != n || passages.len() != n || bytes.len() != n * d * 4 {
            return Err(RetrievalError::Format(format!(
                "manifest declares {n}x{d} but found {} ids, {} passages, {} bytes",
                ids.len(),
                passages.len(),
                bytes.len()
            )));
        }
        if ids.iter().zip(&passages).any(|(id, p)| *id != p.passage_id) {
            return Err(RetrievalError::Format("id list and passages disagree".into()));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let vectors = Array2::from_shape_vec((n, d), values).map_err(|e| RetrievalError::Format(e.to_string()))?;
        Self::from_parts(passages, vectors, manifest.encoder_checkpoint, manifest.similarity)
    }
}
