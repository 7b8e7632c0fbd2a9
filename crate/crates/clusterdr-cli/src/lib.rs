//! Command implementations behind the `clusterdr` binary, split out as a
//! library so the pieces (CSV ingest, config loading, report envelopes) are
//! testable without spawning processes.

pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod report;
