mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod shape;

pub use conv::{conv3d_forward, conv3d_input_grad, conv3d_kernel_grad, ConvGeometry};
pub use elementwise::{sigmoid, BinaryKind, UnaryKind};
