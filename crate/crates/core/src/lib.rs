//! CARSA: a shallow sequence-graph classifier.
//!
//! Each component time series of a subject is encoded by a shared
//! bidirectional LSTM whose per-step states are summed over time. A single
//! self-attention layer mixes the component embeddings, and its attention
//! matrix is read out as a directed connectivity graph. Stacked top-k
//! pooling keeps the most informative components before a two-layer
//! classifier.

pub mod adcore;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod model;
pub mod training;
pub mod verify;

pub use adcore::{Array, Graph, Var};
pub use error::{Error, Result};
pub use model::{ForwardTrace, ModelConfig, ModelParams};
