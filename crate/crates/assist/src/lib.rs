//! Command line and HTTP session service around the restoration model.

pub mod cli;
pub mod config;
pub mod service;
