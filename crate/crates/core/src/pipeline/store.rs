//! Append-only JSON-lines stores with in-memory indexes rebuilt on open.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use lru::LruCache;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{PipelineError, PipelineResult, Result};
use crate::generation::QARecord;

/// One JSON object per line; each write is flushed before it becomes visible.
struct Log {
    path: Option<PathBuf>,
    file: Option<File>,
}

impl Log {
    fn open<T: DeserializeOwned>(path: Option<&Path>) -> Result<(Self, Vec<T>)> {
        let Some(path) = path else {
            return Ok((Self { path: None, file: None }, Vec::new()));
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        file.try_lock()
            .map_err(|e| PipelineError::Store(format!("{} is held by another instance: {e}", path.display())))?;
        let mut items = Vec::new();
        for (i, line) in BufReader::new(&file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item = serde_json::from_str(&line)
                .map_err(|e| PipelineError::Store(format!("{}:{}: {e}", path.display(), i + 1)))?;
            items.push(item);
        }
        Ok((
            Self {
                path: Some(path.to_path_buf()),
                file: Some(file),
            },
            items,
        ))
    }

    fn append<T: Serialize>(&mut self, item: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_vec(item).expect("record serialises");
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        Ok(())
    }
}

/// A keyword set mined from low-confidence queries, with its occurrences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OODIntentRecord {
    pub record_id: Uuid,
    /// Lowercased, sorted and deduplicated.
    pub keywords: Vec<String>,
    /// Query of the first occurrence.
    pub query: String,
    pub count: u64,
    pub first_seen: DateTime<Utc>,
    pub last_seen: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
struct OodEvent {
    record_id: Uuid,
    keywords: Vec<String>,
    query: String,
    timestamp: DateTime<Utc>,
}

#[derive(Default)]
struct OodIndex {
    records: Vec<OODIntentRecord>,
    by_key: HashMap<Vec<String>, usize>,
}

impl OodIndex {
    fn apply(&mut self, e: OodEvent) {
        match self.by_key.get(&e.keywords) {
            Some(&i) => {
                let r = &mut self.records[i];
                r.count += 1;
                r.last_seen = r.last_seen.max(e.timestamp);
            }
            None => {
                self.by_key.insert(e.keywords.clone(), self.records.len());
                self.records.push(OODIntentRecord {
                    record_id: e.record_id,
                    keywords: e.keywords,
                    query: e.query,
                    count: 1,
                    first_seen: e.timestamp,
                    last_seen: e.timestamp,
                });
            }
        }
    }
}

/// Out-of-domain keyword sets. Each occurrence is logged; identical sets
/// aggregate into one record.
pub struct OodStore {
    log: Mutex<Log>,
    index: RwLock<OodIndex>,
}

impl OodStore {
    pub fn in_memory() -> Self {
        Self::open(None).expect("in-memory store")
    }

    /// Opens or creates the log at `path` and replays it.
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let (log, events) = Log::open::<OodEvent>(path)?;
        let mut index = OodIndex::default();
        for e in events {
            index.apply(e);
        }
        Ok(Self {
            log: Mutex::new(log),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.log.lock().expect("ood log").path.clone()
    }

    /// Records sorted by count, descending; earlier first sighting breaks ties.
    pub fn records(&self) -> Vec<OODIntentRecord> {
        let mut v = self.index.read().expect("ood index").records.clone();
        v.sort_by(|a, b| b.count.cmp(&a.count).then(a.first_seen.cmp(&b.first_seen)));
        v
    }

    pub fn get(&self, record_id: Uuid) -> Option<OODIntentRecord> {
        self.index
            .read()
            .expect("ood index")
            .records
            .iter()
            .find(|r| r.record_id == record_id)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("ood index").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn canonical_keywords(keywords: &[String]) -> Vec<String> {
    let set: BTreeSet<String> = keywords
        .iter()
        .map(|k| crate::util::normalize_whitespace(k).to_lowercase())
        .filter(|k| !k.is_empty())
        .collect();
    set.into_iter().collect()
}

/// Logs one occurrence of `keywords` and returns the id of its record.
pub fn record_ood_intent(keywords: &[String], query: &str, store: &OodStore) -> Result<Uuid> {
    let key = canonical_keywords(keywords);
    if key.is_empty() {
        return Err(PipelineError::EmptyKeywords);
    }
    let mut log = store.log.lock().expect("ood log");
    let existing = {
        let idx = store.index.read().expect("ood index");
        idx.by_key.get(&key).map(|&i| idx.records[i].record_id)
    };
    let record_id = existing.unwrap_or_else(Uuid::now_v7);
    let event = OodEvent {
        record_id,
        keywords: key,
        query: query.to_string(),
        timestamp: Utc::now(),
    };
    log.append(&event)?;
    store.index.write().expect("ood index").apply(event);
    Ok(record_id)
}

/// What feedback export needs from an issued result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedQuery {
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<String>,
    #[serde(default)]
    pub contexts: Vec<String>,
}

impl IssuedQuery {
    pub fn from_result(r: &PipelineResult) -> Self {
        Self {
            query_text: r.query_text.clone(),
            draft: r.draft_response.as_ref().map(|d| d.text.clone()),
            contexts: r.contexts.iter().map(|c| c.passage.context_text()).collect(),
        }
    }
}

/// Recently issued query ids, bounded; the least recently used id is
/// forgotten first.
pub struct QueryRegistry {
    cache: Mutex<LruCache<Uuid, IssuedQuery>>,
}

impl QueryRegistry {
    pub fn new(horizon: usize) -> Self {
        let cap = NonZeroUsize::new(horizon).unwrap_or(NonZeroUsize::MIN);
        Self {
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn register(&self, result: &PipelineResult) {
        self.cache
            .lock()
            .expect("query registry")
            .put(result.query_id, IssuedQuery::from_result(result));
    }

    pub fn get(&self, query_id: Uuid) -> Option<IssuedQuery> {
        self.cache.lock().expect("query registry").get(&query_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("query registry").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Edit,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: Uuid,
    pub query_id: Uuid,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_text: Option<String>,
    pub agent_id: String,
    pub timestamp: DateTime<Utc>,
}

impl FeedbackRecord {
    /// Fresh id and current time.
    pub fn new(query_id: Uuid, verdict: Verdict, edited_text: Option<String>, agent_id: impl Into<String>) -> Self {
        Self {
            feedback_id: Uuid::now_v7(),
            query_id,
            verdict,
            edited_text,
            agent_id: agent_id.into(),
            timestamp: Utc::now(),
        }
    }

    /// `edited_text` is present, and non-blank, exactly for edits.
    pub fn validate(&self) -> Result<()> {
        let has_text = self.edited_text.as_deref().is_some_and(|t| !t.trim().is_empty());
        match (self.verdict, has_text) {
            (Verdict::Edit, false) => Err(PipelineError::Validation("verdict `edit` needs edited_text".into())),
            (Verdict::Approve | Verdict::Reject, _) if self.edited_text.is_some() => Err(PipelineError::Validation(
                "edited_text is only allowed with verdict `edit`".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Stored line: the record plus the query it judges.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeedbackEntry {
    #[serde(flatten)]
    record: FeedbackRecord,
    query: IssuedQuery,
}

#[derive(Default)]
struct FeedbackIndex {
    entries: Vec<FeedbackEntry>,
    by_id: HashMap<Uuid, usize>,
}

/// Append-only: no operation changes or removes a stored record.
pub struct FeedbackStore {
    log: Mutex<Log>,
    index: RwLock<FeedbackIndex>,
}

impl FeedbackStore {
    pub fn in_memory() -> Self {
        Self::open(None).expect("in-memory store")
    }

    pub fn open(path: Option<&Path>) -> Result<Self> {
        let (log, entries) = Log::open::<FeedbackEntry>(path)?;
        let mut index = FeedbackIndex::default();
        for e in entries {
            index.by_id.insert(e.record.feedback_id, index.entries.len());
            index.entries.push(e);
        }
        Ok(Self {
            log: Mutex::new(log),
            index: RwLock::new(index),
        })
    }

    pub fn get(&self, feedback_id: Uuid) -> Option<FeedbackRecord> {
        let idx = self.index.read().expect("feedback index");
        idx.by_id.get(&feedback_id).map(|&i| idx.entries[i].record.clone())
    }

    /// Every record in write order.
    pub fn records(&self) -> Vec<FeedbackRecord> {
        let idx = self.index.read().expect("feedback index");
        idx.entries.iter().map(|e| e.record.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("feedback index").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Validates `record` against the issued queries and appends it.
pub fn record_feedback(record: FeedbackRecord, queries: &QueryRegistry, store: &FeedbackStore) -> Result<Uuid> {
    record.validate()?;
    let query = queries
        .get(record.query_id)
        .ok_or(PipelineError::UnknownQuery(record.query_id))?;
    let mut log = store.log.lock().expect("feedback log");
    if store.index.read().expect("feedback index").by_id.contains_key(&record.feedback_id) {
        return Err(PipelineError::Validation(format!("feedback id {} already stored", record.feedback_id)));
    }
    let id = record.feedback_id;
    let entry = FeedbackEntry { record, query };
    log.append(&entry)?;
    let mut idx = store.index.write().expect("feedback index");
    let n = idx.entries.len();
    idx.by_id.insert(id, n);
    idx.entries.push(entry);
    Ok(id)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportFilter {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub since: Option<DateTime<Utc>>,
}

/// Approvals become (query, draft) records, edits (query, edited text);
/// rejections and approvals of results without a draft are skipped.
pub fn export_feedback_for_training(store: &FeedbackStore, filter: &ExportFilter) -> Vec<QARecord> {
    let idx = store.index.read().expect("feedback index");
    idx.entries
        .iter()
        .filter(|e| filter.agent_id.as_ref().is_none_or(|a| *a == e.record.agent_id))
        .filter(|e| filter.since.is_none_or(|t| e.record.timestamp >= t))
        .filter_map(|e| {
            let answer = match e.record.verdict {
                Verdict::Approve => e.query.draft.clone()?,
                Verdict::Edit => e.record.edited_text.clone()?,
                Verdict::Reject => return None,
            };
            Some(QARecord {
                question: e.query.query_text.clone(),
                answer,
                context_passages: e.query.contexts.clone(),
                well_formed: true,
            })
        })
        .collect()
}
