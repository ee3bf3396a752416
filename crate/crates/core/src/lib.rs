//! Dynamic-resolution ROI selection, multi-scale vision-language alignment
//! losses, a small trainable vision-language model and caption metrics.

pub mod align;
pub mod commands;
pub mod dris;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod selfcheck;
pub mod toyvlm;

pub use error::{Error, Result};
pub use grid::{EmbedVec, FeatureGrid, Roi};
