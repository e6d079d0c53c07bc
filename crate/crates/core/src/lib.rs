//! Neural agent assistant toolkit.
//!
//! A customer query flows through a domain gate, a fine-grained intent
//! classifier, dense retrieval with cross-encoder re-ranking, and a
//! knowledge-grounded response generator. Low-confidence queries are mined
//! for out-of-domain keywords instead. Human agents review the drafts and
//! their verdicts feed back into training data.
//!
//! Module map:
//!
//! - [`backends`]: model contracts (encoder, pair scorer, language model,
//!   translator), deterministic `stub:` backends, and a transformer runtime.
//! - [`intent`]: intent classifiers, domain gates, augmentation, few-shot
//!   adaptation and keyword mining.
//! - [`retrieval`]: KB ingestion, sentence chunking, the dense index,
//!   re-ranking and contrastive fine-tuning.
//! - [`generation`]: prompt assembly, decoding and multi-task generator
//!   training.
//! - [`evaluation`]: ranking and text metrics plus evaluation harnesses.
//! - [`pipeline`]: query routing, the OOD and feedback stores, and config.

pub mod backends;
pub mod evaluation;
pub mod generation;
pub mod intent;
pub mod pipeline;
pub mod retrieval;
pub mod train;
pub mod util;

pub use backends::{
    BackendError, DecodingConfig, EncodeMode, EncoderSpec, GeneratorSpec, LanguageModel,
    ModelRegistry, PairScorer, Pooling, TextEncoder, Translator,
};
