//! From-scratch deep-learning micro-engine and evaluation harness for
//! damaged/undamaged insulator classification.
//!
//! The crate provides:
//! - [`nn`]: tensor kernels (conv, batch norm, pooling, dense, softmax) with
//!   hand-written backward passes, all gradient-checked.
//! - [`model`]: the AdeNet and LeNet-5 builders, parameter accounting, and a
//!   bit-exact checkpoint format.
//! - [`data`]: manifest-driven dataset handling, stratified splits, k-fold
//!   plans, batch padding, and a seeded synthetic defect-image generator.
//! - [`train`]: SGD/Adam mini-batch training with early stopping.
//! - [`metrics`]: confusion matrices, macro precision/recall/F1, ROC AUC.
//! - [`explain`]: Grad-CAM heatmaps, overlays, and defect-localization
//!   scoring.
//! - [`shallow`]: handcrafted image features plus a random-forest baseline.

pub mod data;
pub mod explain;
pub mod metrics;
pub mod shallow;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
