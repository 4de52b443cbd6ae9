//! Active domain adaptation for per-pixel classification at desk scale.
//!
//! The crate trains a small per-pixel classifier on a labeled source domain,
//! characterizes that domain with multiple K-means anchors in image-level
//! feature space, actively selects the target samples farthest from every
//! anchor for labeling, and then adapts semi-supervised with an EMA-tracked
//! multi-anchor soft-alignment loss plus pseudo labels.

pub mod anchors;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod selection;

pub mod cli;

pub use error::{Error, Result};
