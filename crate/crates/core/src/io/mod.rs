//! File formats and dataset ingestion.

pub mod annotations;
pub mod config;
pub mod fgrd;

pub use annotations::{ingest, load_annotations, parse_annotations, AnnotationRecord, RleMask};
pub use config::RunConfig;
pub use fgrd::{read_grid, write_grid, FgrdPayload};
