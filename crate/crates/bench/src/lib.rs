//! Harness around `clr-core`: problem suites on disk, single fits, parallel
//! sweeps with aggregates and plot data, metric reports and predictions.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod sweep;

pub use config::{Cell, Grid, SizeSpec, SweepConfig};
pub use error::{BenchError, Result};
