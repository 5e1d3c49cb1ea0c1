//! Minimal tensor and network engine.
//!
//! Tensors are row-major and per-example; feature maps use `[height, width,
//! channels]` layout and vectors use `[len]`. The engine is generic over
//! [`Scalar`] so the same code runs in `f32` for training and in `f64` for
//! gradient checking.

mod gradcheck;
mod init;
mod layers;
mod loss;
mod network;
mod optim;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use init::{glorot_bound, init_params};
pub use layers::{Activation, LayerSpec, Padding};
pub use loss::{bce_loss, bce_vector, BCE_EPSILON};
pub use network::{BlockSpec, ForwardCache, InputSpec, Mode, NetworkSpec};
pub use optim::{rmsprop_step, sgd_step, Optimizer, OptimizerSpec};
pub use rng::Rng;
pub use tensor::{ParamStore, Scalar, Tensor};
