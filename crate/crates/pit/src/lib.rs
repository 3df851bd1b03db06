//! File formats, checkpoints and the command-line driver for [`pit_core`].
//!
//! Formats:
//!
//! * frames: binary PGM/PPM, see [`pnm`];
//! * datasets: `manifest.txt` plus `frames/`, see [`dataset`];
//! * configs: flat `key = value`, see [`config`];
//! * checkpoints: versioned binary container, see [`checkpoint`];
//! * reports and attention maps: see [`report`] and [`attention`].

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod pipeline;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
