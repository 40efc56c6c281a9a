//! Experiment shell around the core library: configuration files, the
//! checkpoint and dataset formats, report emission, and the subcommand
//! implementations used by the `roadseg` binary.
//!
//! Everything is deterministic given (config, seed): reports carry no
//! timestamps, datasets and checkpoints serialize in fixed order, and
//! worker fan-out never changes reduction order. Wall-clock timing goes to
//! stderr only.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod parallel;
pub mod report;
