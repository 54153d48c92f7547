//! File formats, dataset ingestion, the training driver and the evaluation
//! driver around `mtif-core`.

pub mod checkpoint;
pub mod config_file;
pub mod dataset;
pub mod descriptions;
pub mod enrich_dir;
pub mod error;
pub mod evaluate;
pub mod infer;
pub mod io;
pub mod trainer;

pub use error::{HarnessError, Result};
pub use mtif_core as core;
