//! Configuration and stage wiring for the `adrcm` command.

pub mod config;
pub mod pipeline;
