//! File formats, WAV frontend, run manifests and the `mvsa` command line on
//! top of `mvsa-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod frontend;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
