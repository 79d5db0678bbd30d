//! File formats, configuration and pipeline stages for the `ucap` command.

pub mod config;
pub mod formats;
pub mod pipeline;
