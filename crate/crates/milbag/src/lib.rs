//! Files, configuration and orchestration around [`milbag_core`].
//!
//! * [`format`] — the single-bag file.
//! * [`dataset`] — dataset directories with an `index.json`.
//! * [`checkpoint`] — model checkpoints.
//! * [`config`] — presets, TOML files and overrides.
//! * [`cv`] — the parallel cross-validation runner.
//! * [`report`] — JSON reports and metric tables.
//! * [`attention`] — per-instance attention CSV.
//! * [`manifest`] — run manifests and the virtual-bag provenance dump.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod dataset;
pub mod error;
pub mod format;
pub mod manifest;
pub mod report;

pub use error::{Error, FormatError, Result};

/// Environment variable naming the default dataset directory.
pub const DATA_DIR_ENV: &str = "MILBAG_DATA_DIR";
