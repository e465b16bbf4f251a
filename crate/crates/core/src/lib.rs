//! Model-based reconstruction of dynamic MRI series from undersampled
//! per-frame k-space, combining a learned residual CNN denoiser with a
//! frame-similarity graph prior inside a weight-shared unrolled iteration.

pub mod adam;
pub mod config;
pub mod container;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod forward;
pub mod manifold;
pub mod phantom;
pub mod real;
pub mod series;
pub mod unrolled;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use series::{fft2, inner, Direction, DynamicSeries, Fft2};
