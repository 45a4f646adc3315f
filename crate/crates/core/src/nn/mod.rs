//! Low-level differentiable layers.
//!
//! Each layer implements an explicit `forward` that caches whatever the
//! matching `backward` needs. Backward passes accumulate parameter gradients
//! into the layer's [`Param`](crate::param::Param) slots and return the
//! gradient with respect to the layer input.

pub mod act;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use act::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm};
pub use pool::{AvgPool2, MaxPool2, Upsample2};

/// Whether a forward pass is part of training (caches for backward, batch
/// statistics, running-stat updates) or pure inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}
