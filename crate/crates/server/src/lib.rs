//! HTTP chat service, session persistence and the `dst` command line for the
//! dialogue state tracking engine.

pub mod app;
pub mod cli;
pub mod config;
pub mod store;
