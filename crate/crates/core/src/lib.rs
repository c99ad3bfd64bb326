//! Core algorithms for independent-microgrid vulnerability assessment.
//!
//! The crate covers the whole numeric pipeline without touching the file
//! system or threads:
//!
//! - [`microgrid`]: the radial microgrid data model and its random generator.
//! - [`graph`]: degree / edge-betweenness centrality and island detection.
//! - [`attack`]: centrality-weighted disruption probabilities and scenario sampling.
//! - [`lp`] and [`shedding`]: per-island optimal dispatch, scenario shed rate,
//!   Monte Carlo expected load shedding rate (ELSR) and node-level vulnerability.
//! - [`dataset`]: feature extraction, standardization and label-balancing resampling.
//! - [`autodiff`]: a small reverse-mode tape over dense matrices plus Adam.
//! - [`gats`]: the graph attention network with self-attention pooling.
//! - [`train`]: the supervised training loop, regression metrics and a mean baseline.
//!
//! Everything here is `no_std` + `alloc`. IO, CLI and parallel drivers live in
//! the `gridshed` crate.
#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attack;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gats;
pub mod graph;
pub mod lp;
pub mod microgrid;
pub mod rng;
pub mod shedding;
pub mod train;

pub use error::{Error, Result};
