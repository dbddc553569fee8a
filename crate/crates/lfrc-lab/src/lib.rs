//! Desk-scale adversarial-training laboratory.
//!
//! The crate trains small classifiers (an MLP and a miniature residual
//! CNN) under PGD adversarial training with an optional batch-level
//! regularizer that keeps the cosine-similarity structure of adversarial
//! latent features consistent with the natural ones. Around that core it
//! provides white-box and transfer robustness evaluation, similarity-
//! matrix diagnostics (heatmaps, per-batch difference/accuracy scatter,
//! Pearson correlation), dataset ingestion, and deterministic
//! checkpointing.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release -p lfrc-lab --example train_toy
//! cargo run --release -p lfrc-lab --example gradient_check
//! cargo run --release -p lfrc-lab --example attack_sweep
//! cargo run --release -p lfrc-lab --example similarity_heatmap
//! cargo run --release -p lfrc-lab --example correlation_scatter
//! cargo run --release -p lfrc-lab --example transfer_attack
//! cargo run --release -p lfrc-lab --example idx_pipeline
//! ```
//!
//! or with the `lfrc-lab` binary: `lfrc-lab train|eval|analyze|transfer`.

pub mod analysis;
pub mod attacks;
pub mod cli;
pub mod data;
pub mod error;
pub mod lfrc;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor, Var};
