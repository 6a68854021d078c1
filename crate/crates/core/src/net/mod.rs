//! The attention network: backbone, self-attention, region pooling, SE
//! refinement, inter-attention, aggregation and the fused classifier.

pub mod layers;
pub mod model;
pub mod params;

pub use layers::{
    aggregate_regions, backbone_forward, classify, inter_attention, roi_pool, roi_taps, se_residual, self_attention,
    Classification, POOL_SIZE,
};
pub use model::{forward, select_boxes, AgNet, ForwardTrace, LossAndGrads, Prediction};
pub use params::{
    Ablation, AgNetParams, BackboneParams, ConvStage, FusionClassifierParams, InterAttentionParams, NetConfig, ParamVars,
    PoolingMode, RegionSelection, SeResidualParams, SelfAttentionParams,
};
