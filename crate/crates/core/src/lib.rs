//! Flash device IO micro-benchmarking.
//!
//! The crate is organised along the benchmark pipeline:
//!
//! * [`pattern`] turns pattern specifications into deterministic IO schedules.
//! * [`microbench`] expands the nine micro-benchmarks into experiments.
//! * [`device`] exposes block devices: a raw direct-IO backend and an FTL simulator.
//! * [`methodology`] enforces device state, calibrates phases and pauses, and builds plans.
//! * [`runner`] executes runs and summarizes per-IO traces.
//! * [`analysis`] derives start-up, period and the device summary report.
//! * [`campaign`] ties the stages together behind file hand-offs.

pub mod analysis;
pub mod campaign;
pub mod device;
pub mod error;
pub mod methodology;
pub mod microbench;
pub mod pattern;
pub mod runner;
mod seed;

pub use error::{Error, Result};
pub use pattern::{IoRequest, Location, MixSpec, Mode, ParallelSpec, PatternSpec, Timing};

/// Size of a logical sector; every address and IO size is a multiple of it.
pub const SECTOR: u64 = 512;

/// Version stamped into every JSON artifact written by this crate.
pub const SCHEMA_VERSION: u32 = 1;
