//! Local-Global Spatial Prompting (LGSP) for few-shot class-incremental
//! learning, built small enough that every number can be checked.
//!
//! The crate implements the full pipeline on synthetic desk-scale data:
//!
//! - [`tensor`]: a minimal dense f64 tensor, seeded RNG, softmax / cosine /
//!   sigmoid primitives.
//! - [`spectral`]: centered 2D DFT and inverse (naive reference path plus a
//!   radix-2 fast path that must agree with it).
//! - [`gsp`]: global spatial prompting — concentric frequency rings with
//!   differentiable sigmoid masks and learnable band weights.
//! - [`lsp`]: local spatial prompting — a pool of two-layer convolutional
//!   prompt generators with query/key top-k selection.
//! - [`fusion`]: the residual combination of input, local prompt and global
//!   enhancement with learnable scalars.
//! - [`backbone`]: a toy vision transformer with VPT-style token prompts and
//!   a token prompt pool, used both as the frozen feature extractor and as
//!   the apparatus for the token-saturation study.
//! - [`classifier`]: prototype (class-mean) classifier over class-token
//!   features with cosine scoring.
//! - [`protocol`]: session splits, the incremental session loop, cumulative
//!   evaluation and accuracy breakdowns.
//! - [`learn`]: a reverse-mode tape over the ops above, SGD with momentum,
//!   cosine learning-rate schedule, and a finite-difference gradient checker.
//! - [`model`]: the assembled trainable model with named parameter groups.
//! - [`harness`]: config parsing, the binary tensor file format, synthetic
//!   data generation, experiment runner, and PGM/CSV exports.
//!
//! Every run is a pure function of (config, seed): reruns are byte-identical
//! regardless of thread count. See the `examples/` directory for one runnable
//! program per capability and the `lgsp` binary for the subcommand interface.

pub mod backbone;
pub mod classifier;
mod error;
pub mod fusion;
pub mod gsp;
pub mod harness;
pub mod learn;
pub mod lsp;
pub mod model;
pub mod protocol;
pub mod spectral;
pub mod tensor;

pub use error::LgspError;
pub use tensor::{Rng, Tensor};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LgspError>;
