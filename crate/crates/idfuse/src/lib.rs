//! File formats, data ingestion and training workflows around `idfuse-core`.

pub mod checkpoint;
pub mod config_file;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod logs;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
