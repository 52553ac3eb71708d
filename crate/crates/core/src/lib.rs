//! Group-aware pseudo-label transfer for unsupervised domain adaptation
//! of re-identification embeddings.
//!
//! Target pseudo labels come from clustering at several granularities and
//! are refined by entropic optimal transport between samples and class
//! prototypes. Training alternates between encoder updates and label
//! refinement.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod label_transfer;
pub mod losses;
pub mod memory_bank;
pub mod numerics;
pub mod prototypes;
pub mod trainer;

pub use error::{Error, Result};
