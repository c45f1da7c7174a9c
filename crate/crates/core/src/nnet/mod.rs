//! Dense-tensor reverse-mode differentiation and the snow-mask networks.

mod gemm;
pub mod checkpoint;
pub mod gradcheck;
pub mod infer;
pub mod net;
pub mod tape;
pub mod tensor;
pub mod train;

pub use net::{NetConfig, Network, Variant};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
pub use train::{prepare_dataset, train, train_step, EpochLog, Sample, TrainConfig, TrainState};
pub use infer::{infer, infer_image};
