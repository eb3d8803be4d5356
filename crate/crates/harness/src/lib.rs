//! Experiment harness for `lts-core`: dataset loaders, run configuration,
//! the training loop, checkpoints, metrics files and benchmarks.

pub mod alloc;
pub mod bench;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod random_freeze;
pub mod ticket;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use train::{train, RunReport};
