//! Optimal-transport regularization for aligning speech embedding sequences to
//! transcript embeddings.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`matrix`] and [`autodiff`]: dense `f64` matrices and a reverse-mode tape.
//! * [`ot`]: cosine cost matrices, entropic OT via Sinkhorn (linear and log
//!   domain), and a brute-force exact solver for small square instances.
//! * [`loss`]: transport cost, row sparsity penalty and their combination.
//! * [`transform`]: frame stacking, the two-layer adapter, unique target
//!   extraction and similarity-based sequence compression.
//! * [`corpus`] and [`io`]: a deterministic synthetic corpus and matrix files.
//! * [`trainer`]: the two-stage training harness and evaluation.
//! * [`cli`]: the `otreg` command-line tool.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod ot;
pub mod report;
pub mod trainer;
pub mod transform;

pub use autodiff::{Backend, Eager, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use matrix::Matrix;
