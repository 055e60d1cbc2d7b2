//! Next-scale visual autoregressive inference on a desk-sized toy model, with
//! the stage-aware refinement accelerator and its comparison strategies.
//!
//! Module map:
//! - [`matgrid`]: feature maps, bilinear resampling, spectral split.
//! - [`numcore`]: SVD, rank selection, random projection, least squares,
//!   row sampling.
//! - [`varengine`]: scale schedules, quantizer, toy predictor, guidance, and
//!   the vanilla generation loop.
//! - [`stageaccel`]: refinement strategies, rank tables, token restoration,
//!   and the accelerated generation loop.
//! - [`analysis`]: curves, sweeps and CSV reports over generation traces.

// Link the BLAS backend used by `ndarray::dot`.
extern crate blas_src;
extern crate openblas_src;

pub mod error;
pub mod matgrid;
pub mod numcore;
pub mod varengine;
pub mod stageaccel;
pub mod analysis;

pub use error::{Error, Result};
