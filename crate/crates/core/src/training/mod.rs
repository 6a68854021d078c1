//! Augmentation, metrics and the epoch loop.

pub mod augment;
pub mod metrics;
pub mod trainer;

pub use augment::{augment, warp_affine, Affine, AugmentConfig};
pub use metrics::{
    argmax, average_precision, cross_entropy, evaluate_predictions, mean_cross_entropy, rank_of, EvalReport,
};
pub use trainer::{
    derive_seed, evaluate, predict_all, propose_for_image, regions_for_image, train, train_epoch, EpochLog,
    LabeledImage, TrainConfig, TrainState,
};
