//! Experiment drivers, configuration, checkpoints and task data around
//! `odeformer-core`.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod studies;
pub mod suite;
pub mod tasks;
