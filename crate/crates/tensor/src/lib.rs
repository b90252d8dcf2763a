//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]; computations that need gradients are recorded
//! on a [`Tape`] through [`Var`] handles, and [`Tape::backward`] sweeps the
//! record once in reverse.

mod adam;
mod error;
pub mod gradcheck;
pub mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use params::{CheckpointError, ParamStore, ParamVars, CHECKPOINT_MAGIC};
pub use real::Real;
pub use tape::{AdjointFault, Backward, Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, numel, reduce_to_shape, strides, Tensor};
