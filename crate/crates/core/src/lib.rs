//! Dataset condensation for time series.
//!
//! The crate distills a large window set into a small synthetic one whose
//! training dynamics track those of the full data. The pipeline has four
//! stages, each its own module:
//!
//! * [`dataset`]: CSV loading, chronological splits, standardization, and
//!   sliding-window extraction.
//! * [`tsfe`]: the shared feature extractor, a channel-independent stack of
//!   patch attention operators with forecasting and classification heads.
//! * [`trajectory`]: expert trajectory training, the on-disk buffer format,
//!   and curriculum-ranked trajectory matching.
//! * [`condense`]: the outer optimization that learns the synthetic windows
//!   by matching training trajectories and decomposed feature modes.
//!
//! [`baselines`] provides coreset selection alternatives (random, k-center,
//! herding) and [`eval`] the downstream training and metric harness used to
//! compare them. Everything differentiable runs on the reverse-mode tape in
//! [`numerics`], which supports differentiating through unrolled optimizer
//! steps, so gradients of the matching losses reach the synthetic windows.

pub mod baselines;
pub mod condense;
pub mod dataset;
pub mod decomp;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod trajectory;
pub mod tsfe;

pub use error::{Error, Result};
