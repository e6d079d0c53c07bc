use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::backends::{DecodingConfig, ModelRegistry, MODEL_DIR_ENV};
use crate::generation::PromptLayout;
use crate::intent::KeywordConfig;

pub const CONFIG_ENV: &str = "NAA_CONFIG";
pub const SCHEMA_VERSION: u32 = 1;

/// What happens to queries the gate rejects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneralRoute {
    /// No response; a human agent takes over.
    #[default]
    Reject,
    /// A dialogue model answers without retrieval.
    Chitchat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Checkpoints {
    /// Gate artifact directory, or `stub:gate[:p]`.
    pub gate: String,
    /// Intent artifact directory, or `stub:intent[:p]`.
    pub intent: String,
    pub retriever: String,
    pub reranker: String,
    pub generator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chitchat: Option<String>,
}

impl Default for Checkpoints {
    fn default() -> Self {
        Self {
            gate: "gate".into(),
            intent: "intent".into(),
            retriever: "msmarco-distilbert-base-tas-b".into(),
            reranker: "cross-encoder/ms-marco-MiniLM-L-6-v2".into(),
            generator: "gpt2-medium".into(),
            chitchat: None,
        }
    }
}

impl Checkpoints {
    /// Deterministic in-process stand-ins for every stage.
    pub fn stubs() -> Self {
        Self {
            gate: "stub:gate".into(),
            intent: "stub:intent".into(),
            retriever: "stub:hash".into(),
            reranker: "stub:overlap".into(),
            generator: "stub:script".into(),
            chitchat: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// Append-only JSON-lines feedback log. In memory when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_path: Option<PathBuf>,
    /// Issued query ids remembered for feedback.
    pub query_horizon: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            feedback_path: None,
            ood_path: None,
            query_horizon: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Gate positive-class probability must be strictly above this.
    pub gate_threshold: f64,
    /// Intent confidence must be strictly above this to answer.
    pub intent_threshold: f64,
    pub k_retrieve: usize,
    pub top_n_contexts: usize,
    pub general_route: GeneralRoute,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_dir: Option<PathBuf>,
    pub checkpoints: Checkpoints,
    /// Saved index directory. Takes precedence over `kb`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    /// KB file indexed at startup when no saved index is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kb: Option<PathBuf>,
    pub decoding: DecodingConfig,
    pub layout: PromptLayout,
    pub keywords: KeywordConfig,
    pub stores: StoreConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            gate_threshold: 0.5,
            intent_threshold: 0.5,
            k_retrieve: 5,
            top_n_contexts: 3,
            general_route: GeneralRoute::Reject,
            model_dir: None,
            checkpoints: Checkpoints::default(),
            index: None,
            kb: None,
            decoding: DecodingConfig::default(),
            layout: PromptLayout::default(),
            keywords: KeywordConfig::default(),
            stores: StoreConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        for (name, t) in [("gate_threshold", self.gate_threshold), ("intent_threshold", self.intent_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} {t} outside [0, 1]"));
            }
        }
        if self.top_n_contexts == 0 || self.top_n_contexts > self.k_retrieve {
            return bad(format!(
                "need 1 ≤ top_n_contexts ≤ k_retrieve, got {} and {}",
                self.top_n_contexts, self.k_retrieve
            ));
        }
        if self.general_route == GeneralRoute::Chitchat && self.checkpoints.chitchat.is_none() {
            return bad("general_route = \"chitchat\" needs checkpoints.chitchat".into());
        }
        if self.stores.query_horizon == 0 {
            return bad("stores.query_horizon must be at least 1".into());
        }
        self.decoding.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parses a TOML file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `explicit`, else `$NAA_CONFIG`, else defaults; `$NAA_MODEL_DIR` then
    /// overrides `model_dir`.
    pub fn from_env(explicit: Option<&Path>) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut cfg = match explicit.map(Path::to_path_buf).or(env_path) {
            Some(p) => Self::load(&p)?,
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(MODEL_DIR_ENV) {
            cfg.model_dir = Some(PathBuf::from(dir));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn registry(&self) -> ModelRegistry {
        ModelRegistry::new(self.model_dir.clone())
    }

    /// Copy without filesystem paths: path fields are dropped and
    /// path-valued checkpoints are cut to their final component.
    pub fn redacted(&self) -> Self {
        let mut c = self.clone();
        c.model_dir = None;
        c.index = None;
        c.kb = None;
        c.stores.feedback_path = None;
        c.stores.ood_path = None;
        let cp = &mut c.checkpoints;
        for name in [&mut cp.gate, &mut cp.intent, &mut cp.retriever, &mut cp.reranker, &mut cp.generator]
            .into_iter()
            .chain(cp.chitchat.as_mut())
        {
            *name = redact_name(name);
        }
        c
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.model_dir);
        fix(&mut self.index);
        fix(&mut self.kb);
        fix(&mut self.stores.feedback_path);
        fix(&mut self.stores.ood_path);
    }
}

fn redact_name(name: &str) -> String {
    let p = Path::new(name);
    let looks_like_path = p.is_absolute() || name.starts_with('.') || name.starts_with('~') || p.exists();
    if !looks_like_path {
        return name.to_string();
    }
    p.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "<redacted>".into())
}
