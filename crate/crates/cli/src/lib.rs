//! Command-line interface and HTTP service over curvesketch run directories.

pub mod commands;
pub mod rundir;
pub mod service;
