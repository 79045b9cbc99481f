//! Unsupervised domain adaptation for multivariate time series through
//! discrete code transitions.
//!
//! Series are cut into patches and quantized with a two-level cosine
//! residual codebook. Per-class, per-channel first-order transition matrices
//! over the coarse codes are estimated on the labeled source domain and used
//! to score unlabeled target series. Channels are weighted by how well their
//! code transitions align between domains under optimal transport, and the
//! most confident target predictions are selected as pseudo-labels.

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod markov;
pub mod par;
pub mod pipeline;
pub mod pseudolabel;
pub mod record;
pub mod rng;
pub mod rvq;
pub mod synth;
pub mod transport;

pub use error::{Error, ErrorKind, Result};
