//! Command line front end for `csl-core`: scenario files, artifact output
//! and the acceptance suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::CliError;
