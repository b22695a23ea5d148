//! 4D panoptic LiDAR segmentation: voting-based spatio-temporal proposal
//! generation, learned geometric-feature aggregation, cross-window tracklet
//! stitching and LSTQ evaluation.
//!
//! The crate is organized as a pipeline over 4D volumes (stacks of posed
//! scans): [`volume4d`] forms volumes, [`encoder_heads`] produces per-point
//! features, votes and objectness, [`proposals`] turns votes into object
//! proposals, [`aggregation`] merges proposals into window instances,
//! [`tracking`] stitches windows into sequence tracklets and [`metrics`]
//! scores the result. [`synth`] generates deterministic scenes with full
//! ground truth so every stage is verifiable without real sensor data.

pub mod aggregation;
pub mod config;
pub mod encoder_heads;
pub mod grid;
pub mod lidar_io;
pub mod metrics;
pub mod pipeline;
pub mod proposals;
pub mod rng;
pub mod synth;
pub mod tinynet;
pub mod tracking;
pub mod types;
pub mod volume4d;

use thiserror::Error;

/// Crate-wide error, grouped by failure class so callers (notably the CLI)
/// can map errors to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl From<config::ConfigError> for Error {
    fn from(e: config::ConfigError) -> Self {
        Error::Config(e.to_string())
    }
}

impl Error {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
