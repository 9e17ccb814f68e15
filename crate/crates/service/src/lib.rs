//! HTTP service and command-line front end for the `hybridqa` engine.

pub mod cli;
pub mod http;
