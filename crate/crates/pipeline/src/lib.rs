//! Corpus ingestion, synthetic corpora with planted ground truth, batch alignment and
//! precision-recall reporting on top of `cmpalign-core`.

pub mod cli;
pub mod config;
pub mod convert;
pub mod corpus;
pub mod formats;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use config::{Method, PipelineConfig};
pub use corpus::{load_corpus, save_corpus, Corpus, CorpusError, Shot};
pub use pipeline::{run_pipeline, EvaluationRecord, RunOutput};
pub use report::emit_report;
pub use synth::{generate_synthetic, SyntheticSpec};
