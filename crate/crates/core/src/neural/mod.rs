//! Networks, training, checkpoints, and finite-difference verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod train;

pub use checkpoint::{load_network, save_network};
pub use net::{
    binary_cross_entropy, cross_entropy, desk_classifier_spec, desk_detector_spec,
    desk_substitute_spec, sigmoid, softmax, LayerSpec, Network, NetworkSpec,
};
pub use train::{accuracy, agreement, argmax, Optimizer, TrainConfig, TrainReport};
