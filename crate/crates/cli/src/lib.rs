//! Command implementations behind the `rppg` binary.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod evaluate;
pub mod plot;
pub mod train;
