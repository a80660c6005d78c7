//! Command line and HTTP service for the trial matching engine.

pub mod commands;
pub mod config;
pub mod providers;
pub mod server;
pub mod snapshot;
