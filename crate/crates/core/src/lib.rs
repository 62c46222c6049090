//! Butterfly networks as trainable structured linear operators.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: dense matrices, Jacobi SVD / eigensolver, pseudoinverse.
//! * [`butterfly`]: butterfly networks, truncation, application, weight counts.
//! * [`fjlt`]: sampling the fast Johnson-Lindenstrauss transform as a butterfly.
//! * [`grad`]: reverse-mode gradients for chains of linear modules, optimizers.
//! * [`replace`]: the butterfly / small dense / transposed butterfly sandwich.
//! * [`encdec`]: the encoder-decoder butterfly network and critical-point checks.
//! * [`sketch`]: learned sketches for low-rank approximation.
//! * [`datagen`]: synthetic data and matrix file formats.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod butterfly;
pub mod datagen;
pub mod encdec;
pub mod error;
pub mod fjlt;
pub mod grad;
pub mod linalg;
pub mod replace;
pub mod rng;
pub mod sketch;

pub use butterfly::{ButterflyNetwork, TruncatedButterfly};
pub use error::{Error, Result};
pub use linalg::DenseMatrix;
