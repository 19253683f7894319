//! Minimal CPU training engine: tensors, parameter storage, layers with
//! hand-written backward passes, and optimizers.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use layers::{
    BasicBlock, BatchNorm, Conv2d, ConvBn, Dropout, Embedding, GlobalAvgPool, Linear, MaxPool2d, Mode, Pass, Relu,
    Sigmoid,
};
pub use optim::{clip_grad_norm, grad_norm, Optimizer, OptimizerKind, ParamGroup};
pub use params::{Init, Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
