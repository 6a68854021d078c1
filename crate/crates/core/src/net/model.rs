use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::net::layers::{aggregate_regions, backbone_forward, classify, inter_attention, roi_pool, se_residual, self_attention};
use crate::net::params::{AgNetParams, NetConfig, ParamVars, RegionSelection};
use crate::numerics::{Tape, Tensor, Var};
use crate::regions::{BoundingBox, RegionSet};
use crate::scalar::Scalar;

/// Tape handles of the interesting intermediates of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace<'t, T: Scalar> {
    /// Class probabilities `[classes]`.
    pub probs: Var<'t, T>,
    /// Self-attention output `[H, W, C]` (the backbone map when disabled).
    pub features: Var<'t, T>,
    /// Region similarity `[n, n]`; `None` when inter-attention is disabled.
    pub inter_attention: Option<Var<'t, T>>,
    /// Region importance weights `[n]`.
    pub region_weights: Var<'t, T>,
    /// Pooling fusion weights `[2]`, when fused pooling is active.
    pub omega: Option<Var<'t, T>>,
}

/// Boxes fed to the region branch under `selection`, whole image last.
pub fn select_boxes(regions: &RegionSet, selection: RegionSelection) -> Vec<BoundingBox> {
    let mut boxes = match selection {
        RegionSelection::All => regions.primary.iter().chain(&regions.secondary).copied().collect(),
        RegionSelection::PrimaryOnly => regions.primary.clone(),
        RegionSelection::SecondaryOnly => regions.secondary.clone(),
        RegionSelection::WholeImageOnly => Vec::new(),
    };
    boxes.push(regions.whole_image);
    boxes
}

/// Full pipeline: backbone, self-attention, region pooling, SE refinement,
/// inter-attention, aggregation and classification.
pub fn forward<'t, T: Scalar>(
    cfg: &NetConfig,
    params: &ParamVars<'t, T>,
    image: Var<'t, T>,
    regions: &RegionSet,
) -> Result<ForwardTrace<'t, T>> {
    let shape = image.shape();
    let &[height, width, _] = shape.as_slice() else {
        return shape_err("forward", format!("expected [H, W, 3], got {shape:?}"));
    };
    let whole = BoundingBox::whole(width, height);
    if regions.whole_image != whole {
        return shape_err("forward", format!("region set is for {:?}, image is {width}x{height}", regions.whole_image));
    }
    let ab = &cfg.ablation;
    let map = backbone_forward(image, &params.backbone)?;
    let features = if ab.self_attention { self_attention(map, &params.self_attn)? } else { map };
    let boxes = select_boxes(regions, ab.regions);
    let mut pooled = roi_pool(features, &boxes, width, height)?;
    if ab.se_residual {
        pooled = se_residual(pooled, &params.se)?;
    }
    let (inter, alpha) = if ab.inter_attention {
        let (m, alpha) = inter_attention(pooled, &params.inter)?;
        (Some(m), alpha)
    } else {
        (None, pooled)
    };
    let (region_weights, fused) = aggregate_regions(alpha, params.inter.w_alpha, params.inter.b_alpha)?;
    let cls = classify(fused, &params.fusion, ab.pooling)?;
    Ok(ForwardTrace { probs: cls.probs, features, inter_attention: inter, region_weights, omega: cls.omega })
}

/// Plain-tensor view of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub probs: Tensor<T>,
    pub inter_attention: Option<Tensor<T>>,
    pub region_weights: Tensor<T>,
    pub omega: Option<Tensor<T>>,
}

/// Result of one training forward/backward pass.
#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    /// One gradient per parameter tensor, in canonical order.
    pub grads: Vec<Tensor<T>>,
}

/// Network configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AgNet<T> {
    pub config: NetConfig,
    pub params: AgNetParams<T>,
}

impl<T: Scalar> AgNet<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let params = AgNetParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, image: &Tensor<T>, regions: &RegionSet) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let trace = forward(&self.config, &vars, tape.constant(image.clone()), regions)?;
        Ok(Prediction {
            probs: trace.probs.value(),
            inter_attention: trace.inter_attention.map(|v| v.value()),
            region_weights: trace.region_weights.value(),
            omega: trace.omega.map(|v| v.value()),
        })
    }

    /// Cross-entropy of the forward pass against `label`, with gradients.
    pub fn loss_and_grads(&self, image: &Tensor<T>, regions: &RegionSet, label: usize) -> Result<LossAndGrads<T>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, true);
        let trace = forward(&self.config, &vars, tape.constant(image.clone()), regions)?;
        let loss = trace.probs.cross_entropy(label)?;
        let grads = tape.backward(loss)?;
        Ok(LossAndGrads {
            loss: loss.value().item(),
            probs: trace.probs.value(),
            grads: vars.ordered().into_iter().map(|v| grads.wrt(v).clone()).collect(),
        })
    }
}
