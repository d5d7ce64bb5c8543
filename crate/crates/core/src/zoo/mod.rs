//! Original networks: the trainable desk-scale CNN, the synthetic task it
//! solves, and shape-only ResNet catalogs for size accounting.

mod catalog;
mod dataset;
mod network;

pub use catalog::*;
pub use dataset::{gather, Dataset, IMAGE_SIDE, NOISE_STD, NUM_CLASSES, TEST_SIZE, TRAIN_SIZE};
pub use network::{
    accuracy_from_logits, argmax, build_desk_cnn, forward, train_original, BoundNetwork, EpochMetrics,
    OriginalNetwork, OriginalTrainConfig, OriginalTrainReport, Trace,
};
