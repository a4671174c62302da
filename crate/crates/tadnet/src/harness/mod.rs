//! Run-time scaffolding: configuration, data plumbing, the synthetic
//! benchmark, training/inference drivers, and figure rendering.

pub mod config;
pub mod data;
pub mod report;
pub mod synth;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training aborted: {0}")]
    Train(String),
}

impl HarnessError {
    /// Process exit code contract: 2 for config problems, 3 for data
    /// problems (training failures are data-shaped: bad inputs or NaNs).
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Train(_) => 3,
        }
    }
}
