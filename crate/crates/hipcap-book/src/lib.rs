//! Compiled mirror of the guide in `book/`.
//!
//! Each chapter is included as the documentation of an empty module, so
//! every ```rust block in the book runs as a doc-test here. If the library
//! API drifts from what the guide shows, `cargo test -p hipcap-book` fails.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/hierarchy.md")]
pub mod hierarchy {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/relation.md")]
pub mod relation {}

#[doc = include_str!("../../../book/src/decoder.md")]
pub mod decoder {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/sceneworld.md")]
pub mod sceneworld {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
