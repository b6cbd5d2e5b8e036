//! Library side of the `rgbd` binary, exposed so integration tests can
//! drive commands in-process.

pub mod app;
pub mod commands;
pub mod config;
