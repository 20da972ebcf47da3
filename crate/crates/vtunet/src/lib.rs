//! Volumetric transformer for 3D segmentation, self-contained in pure Rust.
//!
//! The crate provides:
//!
//! - [`tensor`]: a dense f64 tensor core with reverse-mode autodiff, checked
//!   shapes, and non-finite guards on every op;
//! - [`windowing`]: 3D token grids, window partitioning, cyclic shifts, and
//!   shifted-window attention masks;
//! - [`attention`]: windowed multi-head self- and cross-attention with
//!   relative position bias;
//! - [`network`]: the full encoder–decoder segmentation model;
//! - [`profile`]: analytic and measured FLOP/parameter accounting;
//! - [`metrics`]: Dice and 95th-percentile Hausdorff segmentation metrics;
//! - [`artefacts`]: k-space corruption (motion, ghosting, spikes) on volumes;
//! - [`io`] and [`cli`]: checkpoint/volume files and the command-line entry
//!   points built on them.

pub mod artefacts;
pub mod attention;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod network;
pub mod profile;
pub mod tensor;
pub mod windowing;

pub use error::{Error, Result};
