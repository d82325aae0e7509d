//! Experiment harness: configs, datasets, training, verification suites and
//! the commands behind the `pvm` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod metrics;
pub mod train;
pub mod verify;
