//! File formats, thread-pool drivers and pipeline stages around
//! `gridshed-core`.

pub mod cli;
pub mod formats;
pub mod parallel;
pub mod pipeline;
