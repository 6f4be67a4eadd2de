//! Micro object detector: three conv blocks (the transferable backbone), a
//! global-average-pooled feature vector, and class and box heads. Forward and
//! backward passes are written out by hand.

pub mod augment;
pub mod checkpoint;
pub mod gradcam;
mod layers;
mod model;
pub mod optim;
mod tensor;
mod train;

pub use gradcam::grad_cam;
pub use model::{
    backward, backward_into, forward, logit_gradient, loss, predict_detection, softmax, Backbone,
    ConvLayer, ForwardCache, LinearLayer, ModelParams, Target, BACKBONE_TENSOR_NAMES, CHANNELS,
    NUM_CLASSES, TENSOR_NAMES,
};
pub(crate) use model::detection_from_cache;
pub use optim::{adamw_step, AdamWConfig, OptimState, PlateauConfig, PlateauState};
pub use tensor::Tensor;
pub use train::{
    accuracy, initial_params, mean_loss, pretrain, train, EpochRecord, LabeledImage, TrainConfig,
    TransferRegime,
};
pub(crate) use train::shuffled;
