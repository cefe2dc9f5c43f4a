//! Reference voxel classifier, optimiser, checkpoints and the training loop.

mod checkpoint;
mod net;
mod optim;
mod train;

pub use checkpoint::Checkpoint;
pub use net::{digest, ensemble_predict, Architecture, ForwardPass, VoxelClassifier, LEAKY_SLOPE};
pub use optim::{poly_lr, sgd_step};
pub use train::{
    train, validation_dsc, EpochLog, StepTrace, TrainOutcome, TrainSample, TrainerConfig, ValSample,
};
