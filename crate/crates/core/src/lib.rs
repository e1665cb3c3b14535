//! Dual-head calibrated deep clustering over precomputed feature embeddings.
//!
//! A clustering head is self-trained on confidence-budgeted pseudo-labels
//! while a separate calibration head learns the mean clustering prediction of
//! fine K-means mini-clusters. Both heads start from feature prototypes.

// Index loops read closer to the math in the numeric kernels; negated
// comparisons are the NaN-rejecting form of range checks.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod heads;
pub mod kmeans;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod protoinit;
pub mod selection;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};
