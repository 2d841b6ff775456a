//! Library surface of the `set2seq` command-line tool, exposed so
//! integration tests can drive commands in-process.

#![forbid(unsafe_code)]

pub mod commands;
pub mod config;
