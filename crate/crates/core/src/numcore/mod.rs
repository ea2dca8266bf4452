//! Dense tensors, reverse-mode differentiation, MLPs, losses and optimizers.

pub mod checkpoint;
pub mod gradcheck;
mod functional;
mod mlp;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use functional::{cross_entropy_full, dropout_mask, mse_features, softmax_with_temperature, LOG_EPS};
pub use mlp::{Activation, Layer, Mlp, MlpTrace, Parameterized};
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};
