//! Synthetic tasks, experiment drivers and reports.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod tasks;
