//! File formats, configuration, run manifests and experiment drivers used by
//! the command-line tool.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod motchallenge;
