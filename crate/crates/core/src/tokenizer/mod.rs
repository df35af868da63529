//! Item tokenization into order-agnostic set identifiers.

mod cf;
mod corpus;
mod semantic;

pub use cf::{pretrain_cf, BprConfig, BprModel, CfTable, CfTokenizer};
pub use corpus::{build_token_corpus, dimension_tags, DimTag, SetIdentifier, TokenCorpus};
pub use semantic::{ae_loss, AeConfig, SemanticAe, DEFAULT_HIDDEN};
