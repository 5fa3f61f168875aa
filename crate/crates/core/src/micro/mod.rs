//! The micro-object benchmark: can a network see an 8x8 patch?

mod dataset;
mod train;

pub use dataset::{
    find_blocks, generate_micro_dataset, hflip_rgb, MicroDataset, MicroDatasetConfig, MicroSample, MicroSplit,
    TemplateSource, TEMPLATE_RANGE,
};
pub use train::{
    cosine_lr, epochs_to_threshold, evaluate, softmax_cross_entropy, split_tensors, train, EpochRecord, TrainConfig,
    TrainLog,
};
