//! File formats, IO and the command-line front end of the detector.
//!
//! The numeric work lives in `sclnet-core`; this crate reads and writes
//! COCO-style annotation files, PNG images, checkpoints and TOML run
//! configs, and implements the `sclnet` subcommands on top of them.

pub mod checkpoint;
pub mod cli;
pub mod coco;
pub mod commands;
pub mod config;
pub mod error;
pub mod image;

pub use error::{CliError, CliResult};
