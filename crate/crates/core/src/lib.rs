//! Cross-language binary/source code matching over normalized LLVM-IR.
//!
//! Pipeline: [`ir`] normalization, [`bpe`] tokenization, a Transformer
//! [`encoder`] pre-trained with [`mlm`] and aligned with the [`triplet`]
//! ranking loss, cosine [`matcher`] and the [`eval`] harness. [`synth`]
//! generates paired corpora with known clone structure.

pub mod bpe;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ir;
pub mod matcher;
pub mod mlm;
pub mod optim;
pub mod synth;
pub mod triplet;

pub use error::{Error, Result};
