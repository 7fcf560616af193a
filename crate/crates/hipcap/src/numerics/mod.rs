//! Tensors, the autodiff tape, the optimizer, gradient checking, and
//! checkpoint serialization. Everything downstream of this module is
//! expressed in terms of [`Graph`] ops over [`ParamStore`] entries.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, rel_err, GradCheckReport, ParamCheck};
pub use graph::{softmax_values, Graph, NodeId};
pub use tensor::{ParamStore, Shape, Tensor};
