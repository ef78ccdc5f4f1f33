//! Post-training KV-cache compression by low-rank factorization of the key
//! and value projections.
//!
//! Each projection `W` (or a group of its head slices) is split by truncated
//! SVD into `A·B`; decoding caches the narrow latent `x·A` instead of the
//! full keys and values, folds `B` into the query and output projections
//! where that is exact, and rebuilds keys tile by tile when RoPE is on.
//!
//! - [`tensor`]: dense matrices, SVD, Cholesky, Hadamard, seeded RNG.
//! - [`decomposition`]: M-, G- and J-LRD factorization, optionally whitened.
//! - [`rank`]: Fisher scores and budgeted rank allocation.
//! - [`quant`]: per-token latent quantization and Hadamard fusion.
//! - [`attention`]: reference and low-rank decode paths.
//! - [`accounting`]: cache, weight and reconstruction-cost models.
//! - [`config`], [`container`], [`pipeline`]: the `palu` CLI's plumbing.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod attention;
pub mod config;
pub mod container;
pub mod decomposition;
pub mod error;
pub mod pipeline;
pub mod quant;
pub mod rank;
pub mod tensor;

pub use error::{PaluError, Result};
pub use tensor::Matrix;
