//! Checkpoint name resolution.
//!
//! A name resolves, in order, to a `stub:` backend, to an existing directory
//! path, or to `<model_dir>/<name>`. `NAA_MODEL_DIR` sets the model directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::nn::{Manifest, NeuralCrossEncoder, NeuralEncoder, NeuralLm, MANIFEST_FILE};
use super::{stub, BackendError, LanguageModel, PairScorer, Result, TextEncoder, Translator};

pub const MODEL_DIR_ENV: &str = "NAA_MODEL_DIR";

#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    model_dir: Option<PathBuf>,
}

/// What a checkpoint directory holds.
enum Stored {
    Stub(String),
    Native(Manifest),
    HuggingFace,
}

impl ModelRegistry {
    pub fn new(model_dir: Option<PathBuf>) -> Self {
        Self { model_dir }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from))
    }

    pub fn model_dir(&self) -> Option<&Path> {
        self.model_dir.as_deref()
    }

    /// Directory holding `name`, if it can be found.
    pub fn resolve(&self, name: &str) -> Result<PathBuf> {
        let direct = Path::new(name);
        if direct.is_dir() {
            return Ok(direct.to_path_buf());
        }
        match &self.model_dir {
            Some(root) => {
                let candidates = [root.join(name), root.join(name.replace('/', "--"))];
                candidates.into_iter().find(|p| p.is_dir()).ok_or_else(|| {
                    BackendError::unavailable(name, format!("not found under model directory {}", root.display()))
                })
            }
            None => Err(BackendError::unavailable(
                name,
                format!("not a directory and {MODEL_DIR_ENV} is unset"),
            )),
        }
    }

    fn inspect(dir: &Path) -> Result<Stored> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Stored::HuggingFace);
        }
        let raw = std::fs::read(&path)?;
        let value: serde_json::Value =
            serde_json::from_slice(&raw).map_err(|e| BackendError::Format(format!("{}: {e}", path.display())))?;
        if let Some(name) = value.get("stub").and_then(|v| v.as_str()) {
            return Ok(Stored::Stub(name.to_string()));
        }
        serde_json::from_value(value)
            .map(Stored::Native)
            .map_err(|e| BackendError::Format(format!("{}: {e}", path.display())))
    }

    pub fn load_encoder(&self, name: &str) -> Result<Arc<dyn TextEncoder>> {
        if name.starts_with(stub::PREFIX) {
            return stub::encoder(name);
        }
        let dir = self.resolve(name)?;
        let wrap = |e: BackendError| annotate(name, e);
        match Self::inspect(&dir).map_err(wrap)? {
            Stored::Stub(s) => stub::encoder(&s),
            Stored::Native(m) => Ok(Arc::new(NeuralEncoder::load(&dir, name, Some(m)).map_err(wrap)?)),
            Stored::HuggingFace => Ok(Arc::new(NeuralEncoder::load(&dir, name, None).map_err(wrap)?)),
        }
    }

    pub fn load_pair_scorer(&self, name: &str) -> Result<Arc<dyn PairScorer>> {
        if name.starts_with(stub::PREFIX) {
            return stub::pair_scorer(name);
        }
        let dir = self.resolve(name)?;
        let wrap = |e: BackendError| annotate(name, e);
        match Self::inspect(&dir).map_err(wrap)? {
            Stored::Stub(s) => stub::pair_scorer(&s),
            Stored::Native(m) => Ok(Arc::new(NeuralCrossEncoder::load(&dir, name, Some(m)).map_err(wrap)?)),
            Stored::HuggingFace => Ok(Arc::new(NeuralCrossEncoder::load(&dir, name, None).map_err(wrap)?)),
        }
    }

    pub fn load_generator(&self, name: &str) -> Result<Arc<dyn LanguageModel>> {
        if name.starts_with(stub::PREFIX) {
            return stub::generator(name);
        }
        let dir = self.resolve(name)?;
        let wrap = |e: BackendError| annotate(name, e);
        match Self::inspect(&dir).map_err(wrap)? {
            Stored::Stub(s) => stub::generator(&s),
            Stored::Native(m) => Ok(Arc::new(NeuralLm::load(&dir, name, Some(m)).map_err(wrap)?)),
            Stored::HuggingFace => Ok(Arc::new(NeuralLm::load(&dir, name, None).map_err(wrap)?)),
        }
    }

    pub fn load_translator(&self, name: &str) -> Result<Arc<dyn Translator>> {
        if name.starts_with(stub::PREFIX) {
            return stub::translator(name);
        }
        Err(BackendError::unavailable(
            name,
            "no machine-translation runtime is bundled; use `stub:identity` or supply a Translator implementation",
        ))
    }
}

/// Load failures surface as backend-unavailable errors naming the checkpoint.
fn annotate(name: &str, e: BackendError) -> BackendError {
    match e {
        BackendError::Unavailable { .. } => e,
        other => BackendError::unavailable(name, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::EncodeMode;

    #[test]
    fn stub_prefix_needs_no_directory() {
        let r = ModelRegistry::new(None);
        assert_eq!(r.load_encoder("stub:hash").unwrap().spec().embedding_dim, 64);
        assert!(r.load_generator("stub:echo").is_ok());
        assert!(r.load_translator("stub:identity").is_ok());
    }

    #[test]
    fn missing_checkpoint_is_unavailable() {
        let tmp = tempfile::tempdir().unwrap();
        let r = ModelRegistry::new(Some(tmp.path().to_path_buf()));
        assert!(matches!(r.load_encoder("no-such-model"), Err(BackendError::Unavailable { .. })));
        assert!(matches!(
            ModelRegistry::new(None).load_pair_scorer("x"),
            Err(BackendError::Unavailable { .. })
        ));
    }

    #[test]
    fn stub_manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let e = stub::encoder("stub:hash-8").unwrap();
        e.save(&tmp.path().join("enc")).unwrap();
        let r = ModelRegistry::new(Some(tmp.path().to_path_buf()));
        let back = r.load_encoder("enc").unwrap();
        let a = e.encode(&["card pin"], EncodeMode::Query).unwrap();
        let b = back.encode(&["card pin"], EncodeMode::Query).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trained_tiny_models_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let r = ModelRegistry::new(Some(tmp.path().to_path_buf()));
        let e = stub::encoder("stub:bert-tiny").unwrap();
        e.save(&tmp.path().join("bi")).unwrap();
        let back = r.load_encoder("bi").unwrap();
        assert_eq!(back.checksum(), e.checksum());
        let x = e.encode(&["open an account"], EncodeMode::Query).unwrap();
        assert_eq!(x, back.encode(&["open an account"], EncodeMode::Query).unwrap());

        let g = stub::generator("stub:gpt2-tiny").unwrap();
        g.save(&tmp.path().join("gen")).unwrap();
        assert_eq!(r.load_generator("gen").unwrap().checksum(), g.checksum());

        let c = stub::pair_scorer("stub:cross-tiny").unwrap();
        c.save(&tmp.path().join("ce")).unwrap();
        let back = r.load_pair_scorer("ce").unwrap();
        assert_eq!(
            back.score_pairs(&[("a", "b")]).unwrap(),
            c.score_pairs(&[("a", "b")]).unwrap()
        );
    }
}
