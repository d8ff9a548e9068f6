//! Trainable factorization of 2D grayscale medical-style images into a
//! binary multi-channel spatial anatomy factor and a low-dimensional
//! Gaussian modality factor, with semi-supervised segmentation, volume
//! regression, cross-modality synthesis and latent-space analysis.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod phantom;
pub mod rng;
pub mod training;

pub use config::{KvMap, LossWeights, ModelConfig, TrainConfig, TrainMode};
pub use data::{
    normalize, Image, ModalityFactor, ModalityPosterior, SegmentationMask, SegmentationProbs,
};
pub use error::{Error, Result};
