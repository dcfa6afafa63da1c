//! File formats, the embedding-service client and the command pipelines
//! around `carrier-core`.

pub mod cli;
pub mod config;
pub mod embed;
pub mod error;
pub mod io;
pub mod model_file;
pub mod pipeline;

pub use error::{AppError, Result};
