//! Command-line pipeline stages and the read-only HTTP API that serves
//! evaluation artifacts to the panel.

pub mod cli;
pub mod config;
pub mod server;
pub mod stages;
