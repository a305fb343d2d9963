//! Closure network, residual loss with hand-written backpropagation, AdamW
//! and the training loop.

mod adamw;
mod loss;
mod network;
mod train;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use loss::{
    loss_and_gradient, loss_gradient, residual_loss, LossOperators, SampleSet, TrainingSample, FIELD_NAMES,
};
pub use network::{
    mlp_forward, unpack_outputs, Architecture, Dense, ForwardCache, InputScaler, MlpParams, NetworkOutput,
    NetworkShape, HEAD_L, HEAD_LX, HEAD_LY,
};
pub use train::{split_indices, train, train_split, CheckpointRecord, CurveRecord, TrainConfig, TrainOutcome};
