//! Command implementations behind the `magic` binary.

pub mod commands;
pub mod config;
pub mod pnm;
pub mod rundir;

pub use config::RunConfig;
