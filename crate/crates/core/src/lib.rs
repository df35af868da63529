//! Generative recommendation with order-agnostic set identifiers.
//!
//! Every item becomes a small set of continuous tokens: one collaborative
//! (CF) token and `N` semantic tokens. A history of such sets is flattened,
//! encoded with a sparse attention mask that hides sibling tokens of the
//! same item, and `N + 1` learnable query slots read out all tokens of the
//! next item in a single pass. The generated set is grounded to real items
//! by scoring it against the per-dimension token corpus.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
