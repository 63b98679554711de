//! Command-line companion to `spatok-core`: file formats, run
//! directories, and the `spatok` binary's subcommands.

pub mod config;
pub mod container;
pub mod dataset;
pub mod manifest;
pub mod pnm;
pub mod run;
pub mod viz;
