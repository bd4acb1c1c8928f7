//! Everything around the restoration math: run configuration, synthetic
//! dataset packs, checkpoints, evaluation reports, the invariant suites and
//! the command implementations behind the `uwadn` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::{Profile, RunConfig};
pub use dataset::{DatasetPack, Split};
pub use error::{PipelineError, Result};
