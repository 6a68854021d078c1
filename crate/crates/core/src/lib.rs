//! Keypoint-driven region attention for image classification.
//!
//! Salient keypoints are clustered into semantic regions, region features are
//! pooled from a shared attention-refined feature map, related to each other
//! with inter-region attention and fused into a class prediction. All numeric
//! code is generic over [`Scalar`] (`f32` for training, `f64` for
//! verification).

pub mod clustering;
pub mod error;
pub mod keypoints;
pub mod net;
pub mod numerics;
pub mod regions;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type AgNet32 = net::AgNet<f32>;
pub type AgNet64 = net::AgNet<f64>;
pub type AgNetParams32 = net::AgNetParams<f32>;
pub type AgNetParams64 = net::AgNetParams<f64>;
pub type LabeledImage32 = training::LabeledImage<f32>;
pub type LabeledImage64 = training::LabeledImage<f64>;
