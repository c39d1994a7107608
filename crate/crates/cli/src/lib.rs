//! Command-line harness for the search: data generation, single-candidate
//! training, full searches and reports.

pub mod commands;
pub mod config;
pub mod report;
mod svg;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    /// 1 usage, 2 input, 3 divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Input(_) | Self::Io { .. } => 2,
            Self::Diverged(_) => 3,
        }
    }
}
