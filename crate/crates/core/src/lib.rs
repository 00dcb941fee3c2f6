//! Two-stage family classifier with an out-of-distribution gate.
//!
//! Stage one is a small feed-forward classifier whose penultimate
//! activations serve as embeddings. Each known family is summarised by an
//! isotropic Gaussian around its embedding centroid, and a sample's distance
//! to every centroid is standardised against that family's own distance
//! statistics. A sample is in-distribution when at least one of those
//! z-scores lies inside the band. Stage two fuses the gate output, the
//! stage-one probabilities and the raw features into a (K+1)-way prediction
//! whose last class is "out of distribution".

// `!(x > 0.0)` is used throughout to reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
