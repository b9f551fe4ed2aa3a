//! File formats, checkpoints, run directories and the command-line driver
//! for `sovmas-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod reports;
pub mod run;
