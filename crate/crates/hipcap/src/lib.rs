//! Hierarchy-parsing image captioning.
//!
//! The crate turns a set of detected object boxes into a three-level tree
//! (image root, region nodes, instance leaves) using an IoU-threshold
//! attachment rule, refines node features bottom-up with a child-sum tree
//! LSTM, optionally enriches them with a relation-aware graph convolution,
//! and decodes sentences with a two-layer attention LSTM. Training (teacher
//! forcing plus a self-critical fine-tuning stage and a multi-label
//! recognition head), caption metrics, a synthetic scene generator, and a
//! finite-difference gradient checker are all included, in plain `f64` with
//! no external tensor runtime.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod training;

pub use error::{HipError, Result};
