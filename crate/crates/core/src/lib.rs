//! Biplanar radiograph to CT volume reconstruction.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), CT
//! volume handling and synthetic radiographs ([`volume`], [`drr`]), the
//! two-view generator and patch critic ([`model`]), and the training and
//! evaluation tooling built on top of them.

pub mod checks;
mod codec;
pub mod dataset;
pub mod drr;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
