//! Overlap/yaw network: tensors, layers, losses, model and training.

pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use model::{
    correlation_head, image_to_input, Architecture, Channel, ChannelSet, LossParams, ModelWeights, PairLoss,
    PairPrediction, PairTarget, ShapeTrace,
};
pub use tensor::Tensor;
