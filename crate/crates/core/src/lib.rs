//! Projection-based point convolution: a point-feature branch fused with one
//! or more project / 2D-convolve / backproject branches, plus the
//! encoder-decoder segmentation network assembled from those modules,
//! synthetic training data and metrics.

pub mod backbone;
pub mod conv2dblock;
pub mod datametrics;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod numkernel;
pub mod pointgrid;
pub mod ppconv;
pub mod projection;

pub use error::{Error, Result};
