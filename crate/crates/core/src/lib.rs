//! Tree-species segmentation for aerial canopy imagery.
//!
//! The crate covers the whole pipeline: cutting an orthomosaic and its
//! species map into 64×64 patches ([`raster`]), building a stratified and
//! augmented dataset ([`dataset`]), training a U-Net with a coverage-weighted
//! cross-entropy ([`model`], on top of the small autodiff engine in
//! [`autodiff`]), and evaluating it ([`eval`]). [`synth`] produces synthetic
//! scenes for testing without field data.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
