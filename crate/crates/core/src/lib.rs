//! Core of the sonoscan agent: a hashing text embedder, a flat cosine
//! index, the API catalog and robotic handbook, a deterministic ultrasound
//! robot simulator, prompt assembly, the think/act grammar, the execution
//! loop and the evaluation harness.

pub mod embedding;
pub mod eval;
pub mod executor;
pub mod knowledge_base;
pub mod llm;
pub mod prompt;
pub mod robot_sim;
pub mod vector_index;

#[cfg(test)]
pub(crate) mod test_support;

pub use embedding::{Embedder, EmbedderBackend, EmbedderConfig, EmbeddingVector};
pub use executor::{run_task, ExecutionTrace, ExecutorConfig, ExecutorSession, TraceStatus, Turn};
pub use knowledge_base::{ApiCatalogEntry, HandbookProcedure, KnowledgeBase, RetrievedContext};
pub use llm::{GenerationParams, LlmBackend, ParsedTurn};
pub use robot_sim::{ApiCall, BodyRegion, Observation, RobotState, ScanTask};
pub use vector_index::{FlatIndex, SearchHit};
