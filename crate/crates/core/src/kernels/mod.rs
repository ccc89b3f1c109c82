//! Dense differentiable kernels.

pub mod act;
pub mod conv;
mod flat;
pub mod norm;

pub use act::{leaky_relu, leaky_relu_backward, DEFAULT_SLOPE};
pub use conv::{conv3d, conv3d_backward, conv3d_transpose, conv3d_transpose_backward, ConvGrads, ConvSpec};
pub use norm::{instance_norm, masked_instance_norm, masked_instance_norm_backward, NormCache, NormGrads};
