//! Illumination-robust local patch descriptor learning.
//!
//! The crate trains a small convolutional network that maps 64×64
//! grayscale patches to unit-norm descriptors, using hard-positive and
//! hard-negative in-batch mining, a weighted (outlier-emphasizing)
//! triplet loss, and a two-dataset separation training scheme that feeds
//! one batch from each domain through shared weights per optimizer step.
//! It ships with a fixed-camera correspondence dataset builder, a
//! synthetic two-domain benchmark, and an mAP evaluation harness
//! covering verification, matching and retrieval.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod net;
pub mod schedule;
pub mod tensor;

pub mod bench;
pub mod config;

pub use error::{Error, Result};
