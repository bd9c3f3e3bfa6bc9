//! Multi-pass rewriting: a learned rewriter repeatedly improves a draft,
//! a learned evaluator scores each draft and decides when to stop, and a
//! prioritized trainer recycles poorly rewritten samples.

pub mod bleu;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod pgd;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
