//! File formats, dataset manifests, run configuration, reports and the
//! command-line driver built on `dclseg-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod manifest;
pub mod report;

pub use dclseg_core as core;
