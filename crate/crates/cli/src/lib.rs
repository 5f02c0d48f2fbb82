//! Stage orchestration for the `diffattack` command.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{RunConfig, VariantKind};
pub use error::{CliError, CliResult};
pub use stages::{Outcome, Run};
