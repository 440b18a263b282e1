//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The engine is a flat tape: [`Graph`] owns every intermediate value, ops
//! append nodes and return [`NodeId`]s, and [`Graph::backward`] walks the tape
//! in reverse. Tensors are immutable once recorded; a graph belongs to one
//! thread, while distinct graphs may run on different threads in parallel.
//!
//! Everything is generic over [`Scalar`] so the same kernels run in `f32`
//! (training / decoding) and `f64` (gradient checking and causality probes).

mod grad_check;
mod graph;
#[allow(clippy::module_inception)]
mod tensor;

pub use grad_check::{grad_check, grad_check_multi};
pub use graph::{Graph, NodeId};
pub use tensor::{lit, PadMode, Scalar, Tensor};
