//! Experiment orchestration for the detection lab: configuration,
//! seeded training arms, parallel corruption evaluation, and report
//! assembly. The binary in `main.rs` exposes these as subcommands.

pub mod config;
pub mod evalrun;
pub mod report;
pub mod study;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Core(#[from] sdgod_core::CoreError),
    #[error("training aborted: {0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
