//! Command implementations behind the `memlab` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod embeddings;
