//! Optimizers, schedules, training loops, checkpointing and metrics.

pub mod checkpoint;
pub mod config;
pub mod loops;
pub mod metrics;
pub mod optim;
