//! Toy decoder-only transformer with hand-written backpropagation.

mod backward;
pub mod checkpoint;
pub(crate) mod forward;
mod loss;
mod optim;
mod params;
mod train;

pub use backward::{backward, backward_with, Gradients};
pub use forward::{forward_with_offsets, forward_with_trace, LayerTrace};
pub use loss::{cross_entropy_with_grad, lm_loss, softmax_rows, CrossEntropy, Objective, Scaled, TraceGrad};
pub use optim::{Adam, OptimizerConfig};
pub use params::{block_tensor_name, BlockParams, LmConfig, LmParams, BLOCK_TENSORS};
pub use train::{train, train_with, TrainConfig, TrainReport, TrainableMask};
