//! Multiple-instance-learning detection heads over precomputed object
//! proposals.
//!
//! The crate implements four head variants (`base`, `sparse`, `joint`,
//! `full`) that turn per-proposal classification/detection logits and
//! objectness scores into image-level predictions, their losses and exact
//! analytic gradients, a deterministic AdamW trainer with finite-difference
//! gradient checking, COCO-style detection metrics, and a seeded synthetic
//! scenario generator for weak supervision experiments.
//!
//! Modules:
//! - [`mathcore`]: softmax / sigmoid / sparsemax and their VJPs,
//! - [`milhead`]: head variants, losses, gradients, inference, diagnostics,
//! - [`trainer`]: AdamW training loop and gradient-check harness,
//! - [`evalkit`]: IoU, average precision, mAP / AP50 / mAR,
//! - [`datagen`]: scenario generation and JSONL dataset I/O.

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod mathcore;
pub mod matrix;
pub mod milhead;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
