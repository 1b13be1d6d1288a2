//! Pipeline companion to `dcqfa-core`: run configuration, file formats
//! (demos, device profiles, checkpoints), report emission and the stage
//! orchestration behind the `dcqfa` binary.

pub mod formats;
pub mod pipeline;
pub mod profiles;
pub mod reports;
pub mod runconfig;

pub use pipeline::{CliError, SubnetSelector};
pub use runconfig::RunConfig;
