//! Experiment orchestration: datasets, checkpoints, configuration and reports.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;
