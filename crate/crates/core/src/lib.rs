//! Graph-attention knowledge-graph completion.
//!
//! An encoder propagates entity embeddings over the reverse-augmented train
//! graph with two attention networks per head, one over entity features and
//! one over entity features gated by relation embeddings. A convolutional
//! decoder scores every entity as the tail of a `(head, relation)` query.
//! Training uses 1-vs-all binary cross-entropy with AdamW; evaluation ranks
//! the gold entity among filtered candidates.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod kg;
pub mod model;
pub mod optim;
pub mod params;
pub mod run;
pub mod trainer;

pub use config::{Mode, RunConfig};
pub use error::{GathError, Result};
pub use kg::{KnowledgeGraph, Split, Triple};
pub use model::GathModel;
pub use trainer::Trainer;
