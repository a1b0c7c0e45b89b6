//! Command line and HTTP surface over the `logtalk` library.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
