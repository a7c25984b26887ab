//! Command-line experiment runner for GMoPE.
//!
//! Configuration documents are JSON with the sections `data`, `alignment`,
//! `model`, `router`, `objective`, `train`, `eval` and `output`; any key can
//! be overridden on the command line as a dotted path.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod plots;

pub use cli::{exit_code, run, Cli};
