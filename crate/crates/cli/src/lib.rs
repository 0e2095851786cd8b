//! Command line, configuration and file formats for the `dmha-core`
//! emotion recognition model.

pub mod cli;
pub mod commands;
pub mod config;
pub mod formats;
pub mod manifest;
pub mod wav;

pub use config::RunConfig;
pub use formats::FormatError;
