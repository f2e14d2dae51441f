//! Document-level biomedical relation extraction with synthetic summary
//! augmentation, document-relation cross-mapped training data, and
//! CUI-scoped retrieval-augmented inference.

pub mod adrcm;
pub mod corpus;
pub mod eval;
mod exec;
pub mod inference;
pub mod iors;
pub mod kb;
pub mod llm;
pub mod model;
pub mod template;

pub use adrcm::{ADRCMRecord, FineTuneExport, Hyperparams, Provenance};
pub use corpus::{CandidatePair, Corpus, CorpusError};
pub use eval::{EvalReport, Locality};
pub use inference::{Prediction, RagMode};
pub use iors::{IorsConfig, IorsOutcome, SyntheticRecord};
pub use kb::{Chunk, CuiIndex, KbDocument, RetrievalResult};
pub use llm::{ChatBackend, ChatExchange, Embedder, LlmError, LlmGateway};
pub use model::{DatasetTag, Document, Entity, EntityType, Mention, RelationSchema, TrainingSample, Triplet};
