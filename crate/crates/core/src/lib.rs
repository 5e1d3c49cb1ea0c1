//! Two-task skin lesion classification pipeline.
//!
//! The crate covers the whole path from ground-truth tables to a ranked
//! evaluation report:
//!
//! - [`data`]: ground-truth and clinical metadata ingestion, binary task labels.
//! - [`imageproc`]: luma conversion, bilinear resize, channel replication,
//!   global-mean subtraction and the `scratch` / `transfer` profiles.
//! - [`splits`]: class-stratified partitioning and minority oversampling.
//! - [`nn`]: a small tensor engine with reverse-mode gradients, BCE loss,
//!   SGD (Nesterov) and RMSprop.
//! - [`models`]: Scratch, FeatureExtractor, FineTune and Hybrid networks over
//!   a named-block backbone, plus the `LFWT` weights format.
//! - [`train`]: the epoch loop with plateau LR reduction, early stopping and
//!   best-checkpoint tracking.
//! - [`metrics`]: ROC AUC, accuracy, average precision and the results table.
//! - [`synth`]: synthetic shape datasets for desk-scale experiments.

pub mod data;
pub mod error;
pub mod imageproc;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod splits;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
