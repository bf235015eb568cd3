//! Worst-case consistency regularization for semi-supervised learning.
//!
//! The crate is a small, self-contained laboratory:
//!
//! - [`autodiff`]: dense `f64` tensors with a reverse-mode tape.
//! - [`model`]: MLP / single-conv classifiers, convolution operator matrices,
//!   spectral norms and the layer-wise network distance.
//! - [`data`]: two-moons generation, IDX ingestion, labeled/unlabeled splits
//!   and batch streams.
//! - [`augment`]: weak and strong transformations and K-variant uncertainty sets.
//! - [`losses`]: cross-entropy variants, aggregation rules and the
//!   thresholded pseudo-label loss.
//! - [`trainer`]: the alternating max-selection / gradient-step training loop.
//! - [`theory`]: closed-form generalization-bound evaluators.
//! - [`convergence`]: Moreau-envelope diagnostics on max-of-quadratics testbeds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod convergence;
pub mod data;
mod error;
pub mod losses;
pub mod model;
pub mod plot;
pub mod rng;
pub mod selfcheck;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
