//! Open-set single-source domain generalization toolkit.
//!
//! Trains a small convolutional classifier on one labeled source domain and
//! evaluates it on unseen target domains, where test images may belong to
//! classes never seen during training. Robustness comes from four pieces
//! that can be toggled independently: background suppression of training
//! images, feature restyling driven by batch-level style uncertainty,
//! distillation from the suppressed branch into the original branch, and
//! one-vs-all boundary heads trained on edge maps with hard negative mining.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod content;
pub mod data;
pub mod eval;
pub mod error;
mod imgio;
pub mod losses;
pub mod model;
pub mod style;
pub mod tools;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
