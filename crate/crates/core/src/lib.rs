//! Local Hebbian learning of convolutional filter banks, NNL-CONV networks
//! (patch normalization + rectified power activations), supervised baselines,
//! and the shadow-robustness / transfer evaluation machinery around them.
//!
//! Everything is deterministic given a seed: kernels pin their accumulation
//! order, shuffles use a counter-based ChaCha8 stream, and results are
//! bit-identical for any thread count.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod hebbian;
pub mod model;
pub mod numeric;
pub mod patches;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use numeric::{Matrix, Scalar};
