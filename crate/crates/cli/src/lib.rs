//! Command-line front end of `regdif-core`: data generation, model fits,
//! DIF tests and simulation studies, each writing a manifest with input
//! and output digests.

pub mod commands;
pub mod error;
pub mod files;
pub mod formats;
pub mod manifest;

pub use commands::{run, Cli, Command};
pub use error::{CliError, CliResult};
pub use formats::{CoordinateReport, FitFile, NamedValue, TestMethod, TestReport};
pub use manifest::RunManifest;
