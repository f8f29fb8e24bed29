//! Segmentation network: architecture, deep-supervision loss and training.

mod augment;
mod model;
mod train;

pub use augment::{sample_training_patch, Augment, TrainingPatch, TrainingVolume, AUGMENTATIONS};
pub use model::{accumulate, seg_loss, ArchConfig, HuWindow, LossWeights, NormMode, SegModel, SegOutput};
pub use train::{
    batch_step, load_model, lr_at, save_model, train, train_with_progress, training_volumes, SegNetConfig, Sgd,
    TrainLog,
};

#[cfg(test)]
mod tests;
