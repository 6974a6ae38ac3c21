//! Dense-network toolkit: tensors, forward kernels, a reverse-mode tape and
//! Adam. Sized for small transformer and MLP models in 64-bit floats.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use ops::{dense_forward, layer_norm, self_attention, LAYER_NORM_EPS};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2D;

/// Standard PyTorch-style fan-in bound for uniform initialization.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
