//! Command-line tools and the HTTP trace service.

pub mod args;
pub mod commands;
pub mod service;
