//! Command line, run configuration, checkpoints and file formats for
//! [`jkoflow_core`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
