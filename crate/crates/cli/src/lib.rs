//! Command implementations and the annotation HTTP server behind the
//! `vfiqa` binary.

pub mod commands;
pub mod server;
