//! Unsupervised lesion segmentation for lung CT.
//!
//! Infected slices are translated into synthetic healthy slices by a pair of
//! cycle-consistent generators; the lesion is what remains after subtracting
//! the synthetic image from the real one and cleaning up the residual.

pub mod autodiff;
pub mod cyclegan;
pub mod error;
pub mod imgvol;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod postproc;

pub use error::{Error, Result};
