//! Batch pipelines behind the `flowrig` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixture;
pub mod output;
pub mod scenarios;
pub mod viz;
