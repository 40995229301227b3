//! Filesystem, configuration and command-line layer over `afp-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod report;

pub use config::RunConfig;
pub use error::{AppError, Result};
