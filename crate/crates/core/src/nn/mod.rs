//! Reverse-mode neural-network substrate: tensors, layers and optimizers.

mod layers;
mod optim;
mod tensor;

pub use layers::{dense_forward, relu, softmax, Layer, LayerKind, LayerSpec, Sequential};
pub(crate) use layers::{log_softmax_row, softmax_in_place};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub(crate) use tensor::ensure_same_shape;
pub use tensor::Tensor;
