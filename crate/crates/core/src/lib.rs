//! Fuse a trained base classifier with an auxiliary per-instance oracle score
//! (for example an LLM's judgment of each instance).
//!
//! The crate provides:
//!
//! - [`dataset`]: CSV/JSONL ingestion, synthetic data, splits and folds.
//! - [`base_model`]: a standardized logistic-regression scorer with
//!   out-of-fold predictions.
//! - [`ensemble`]: constant and piecewise-constant linear fusion of base and
//!   oracle scores.
//! - [`calibration`]: grid-discretized cell-wise and additive calibrators that
//!   condition on both the base score and the oracle score.
//! - [`transfer`]: covariate-shift training-set augmentation with
//!   oracle-labeled samples and a slack-banded loss.
//! - [`oracle`]: cached, HTTP and synthetic oracle score providers.
//! - [`harness`]: metrics, configuration and experiment orchestration.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base_model;
pub mod calibration;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod optim;
pub mod oracle;
pub mod persist;
pub mod rng;
pub mod transfer;

pub use error::{Error, Result};
