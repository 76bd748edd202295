//! Component-level analysis of in-context learning in small decoder-only
//! transformers.
//!
//! The crate scores attention heads by gradient sensitivity and FFNs by
//! oracle removal, prunes them iteratively from those rankings, compares
//! rankings with rank correlation and top-k overlap, and measures each
//! head's prefix-matching and copying ability on repeated random sequences.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod importance;
pub mod induction;
pub mod io;
pub mod model;
pub mod pruning;
pub mod registry;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
