//! Lightweight single-stage ore detector.
//!
//! The crate provides the full model family (CSP backbone with optional
//! grouped multi-scale attention, progressive pyramid neck with adaptive
//! spatial fusion or a classic PAN baseline, pooling-pyramid variants), the
//! MPDIoU-based composite detection loss, COCO-style evaluation metrics, a
//! synthetic two-class dataset generator with box-consistent augmentation,
//! and the training/evaluation/prediction/profiling engines behind the CLI.

pub mod augment;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod draw;
pub mod ema;
pub mod error;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nms;
pub mod nn;
pub mod profile;
pub mod runner;
pub mod sppf;
pub mod synthetic;

pub use config::{AnchorSet, LossWeights, ModelConfig, NeckKind, SppKind, TrainConfig};
pub use error::{Error, Result};
