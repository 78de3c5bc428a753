//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records each operation as it is evaluated; calling
//! [`Graph::backward`] on a scalar node fills in gradients for every node
//! that contributed to it. Broadcasting is limited to adding a bias row
//! ([`Graph::add_row`]) and per-row scaling ([`Graph::scale_rows`]).

mod activation;
mod array;
mod gradcheck;
mod graph;
mod lstm;

pub use array::Array;
pub use gradcheck::{gradcheck, GradCheck, DEFAULT_STEP};
pub use graph::{Graph, Var};
