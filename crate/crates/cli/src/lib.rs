//! Config-driven experiment runner for cost-sensitive adversarial training.
//!
//! [`config`] turns a JSON experiment description into a resolved,
//! hash-named configuration; [`run`] implements the `train`, `eval`,
//! `compare` and `gen-data` subcommands on top of `wpgd-core`.

pub mod config;
pub mod error;
pub mod run;

pub use config::{load_config, ExperimentConfig, ResolvedConfig, ARTIFACT_VERSION};
pub use error::{CliError, Result};
