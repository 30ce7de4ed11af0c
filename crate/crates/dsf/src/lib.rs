//! Discovery and separation of predictive and nuisance factors.
//!
//! This crate trains classifiers whose latent code splits into two
//! embeddings: `z_p`, which keeps only what predicts the target, and `z_n`,
//! which absorbs nuisance structure (rotation angle, stroke width, ...).
//! Compression of `z_p` runs through an echo noise channel whose mutual
//! information with the input has a closed form, and independence between
//! the embeddings is enforced either by compressing both codes (DSF-C) or
//! by an HSIC kernel penalty (DSF-H). DSF-E is the plain
//! information-bottleneck ablation.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each one demonstrates a single capability end to end. The `dsf` binary
//! exposes the same machinery as subcommands (`generate`, `train`, `grid`,
//! `probe`, `eval`, `export`, `micheck`).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod echo;
pub mod error;
pub mod eval;
pub mod hsic;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{DsfError, Result};
