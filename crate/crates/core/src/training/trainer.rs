use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::GmmConfig;
use crate::error::{Error, Result};
use crate::keypoints::{to_grayscale, DetectorConfig};
use crate::net::AgNet;
use crate::numerics::{SgdState, StepDecay, Tensor};
use crate::regions::{grid_regions, propose_regions, RegionProposal, RegionSet, RegionSource, DEFAULT_MIN_SIDE};
use crate::scalar::Scalar;
use crate::training::augment::{augment, AugmentConfig};
use crate::training::metrics::{argmax, evaluate_predictions, EvalReport};

/// Optimisation, augmentation and region-pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub kappa: usize,
    pub image_size: usize,
    /// Minimum side of a primary region box, in pixels.
    pub region_min_side: f64,
    pub detector: DetectorConfig,
    pub gmm: GmmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-5,
            momentum: 0.99,
            decay_factor: 0.1,
            decay_every: 25,
            augment: AugmentConfig::default(),
            seed: 0,
            kappa: 8,
            image_size: 224,
            region_min_side: DEFAULT_MIN_SIDE,
            detector: DetectorConfig::default(),
            gmm: GmmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.augment;
        let problems = [
            (self.batch_size == 0, "batch_size must be at least 1"),
            (!(self.lr >= 0.0 && self.lr.is_finite()), "lr must be finite and non-negative"),
            (!(0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (!(self.decay_factor > 0.0), "decay_factor must be positive"),
            (self.decay_every == 0, "decay_every must be at least 1"),
            (self.kappa == 0, "kappa must be at least 1"),
            (self.image_size == 0, "image_size must be positive"),
            (!(a.max_translation >= 0.0 && a.max_rotation_degrees >= 0.0), "augmentation ranges must be non-negative"),
            (!(a.scale_min > 0.0 && a.scale_min <= a.scale_max), "need 0 < scale_min <= scale_max"),
            (!(self.region_min_side >= 0.0), "region_min_side must be non-negative"),
        ];
        if let Some((_, msg)) = problems.iter().find(|(bad, _)| *bad) {
            return Err(Error::InvalidArgument(msg.to_string()));
        }
        self.detector.validate()?;
        self.gmm.validate()
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay { initial: self.lr, factor: self.decay_factor, every_epochs: self.decay_every }
    }
}

/// An image with its class index and a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<T> {
    /// `[H, W, 3]` with values in `[0, 1]`.
    pub image: Tensor<T>,
    pub label: usize,
    pub id: String,
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_top1,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{},{},{:.3}", self.epoch, self.lr, self.train_loss, self.train_top1, self.wall_seconds)
    }
}

/// Detect, cluster and box one image, with the grid fallback also covering
/// images too small for the detector.
///
/// Proposals are always computed in `f64`: with pixel-scale coordinates and
/// a small covariance ridge, 2x2 determinants of near-degenerate components
/// lose their sign in single precision. It also makes the regions of an
/// image independent of the network's scalar type.
pub fn propose_for_image<T: Scalar>(image: &Tensor<T>, cfg: &TrainConfig) -> Result<RegionProposal<f64>> {
    let gray = to_grayscale(&image.cast::<f64>())?;
    match propose_regions(&gray, &cfg.detector, &cfg.gmm, cfg.kappa, cfg.region_min_side) {
        Err(Error::ImageTooSmall { width, height, .. }) => Ok(RegionProposal {
            regions: RegionSet::from_primary(grid_regions(cfg.kappa, width, height), width, height, RegionSource::GridFallback),
            keypoints: Vec::new(),
            gmm: None,
        }),
        other => other,
    }
}

pub fn regions_for_image<T: Scalar>(image: &Tensor<T>, cfg: &TrainConfig) -> Result<RegionSet> {
    Ok(propose_for_image(image, cfg)?.regions)
}

/// Mixes a base seed with two stream indices (splitmix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model, optimizer and progress: everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub net: AgNet<T>,
    pub sgd: SgdState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: AgNet<T>, cfg: &TrainConfig) -> Result<Self> {
        let sgd = SgdState::new(net.params.named().into_iter().map(|(_, t)| t), T::lit(cfg.lr), T::lit(cfg.momentum))?
            .with_decay(T::lit(cfg.decay_factor), cfg.decay_every);
        Ok(Self { net, sgd, epoch: 0 })
    }
}

struct ItemResult<T> {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor<T>>,
}

fn item_step<T: Scalar>(net: &AgNet<T>, item: &LabeledImage<T>, cfg: &TrainConfig, seed: u64) -> Result<ItemResult<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = augment(&item.image, &cfg.augment, &mut rng)?;
    let regions = regions_for_image(&image, cfg)?;
    let out = net.loss_and_grads(&image, &regions, item.label)?;
    Ok(ItemResult { loss: out.loss.as_f64(), correct: argmax(out.probs.data()) == item.label, grads: out.grads })
}

/// Runs one epoch (numbered `state.epoch + 1`) of mini-batch SGD.
pub fn train_epoch<T: Scalar>(state: &mut TrainState<T>, data: &[LabeledImage<T>], cfg: &TrainConfig) -> Result<EpochLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let epoch = state.epoch + 1;
    let lr = cfg.schedule().lr_at(epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));

    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let net = &state.net;
        let results: Vec<Result<ItemResult<T>>> = batch
            .par_iter()
            .map(|&i| item_step(net, &data[i], cfg, derive_seed(cfg.seed, epoch as u64, i as u64)))
            .collect();
        let ids = || batch.iter().map(|&i| data[i].id.as_str()).collect::<Vec<_>>().join(", ");
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut batch_loss = 0.0;
        for r in results {
            let r = r.map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {b}, items [{}]: {msg}", ids())),
                other => other,
            })?;
            batch_loss += r.loss;
            correct += usize::from(r.correct);
            match grads.as_mut() {
                None => grads = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        a.add_assign(g)?;
                    }
                }
            }
        }
        let scale = T::one() / T::from_usize_lossy(batch.len());
        let grads: Vec<Tensor<T>> = grads.expect("non-empty batch").iter().map(|g| g.map(|v| v * scale)).collect();
        if !batch_loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: loss {batch_loss} on items [{}]", ids())));
        }
        loss_sum += batch_loss;
        let mut params = state.net.params.tensors();
        state.sgd.step_with_lr(&mut params, &grads, T::lit(lr))?;
        state.net.params.set_tensors(params)?;
    }
    state.epoch = epoch;
    Ok(EpochLog {
        epoch,
        lr,
        train_loss: loss_sum / data.len() as f64,
        train_top1: correct as f64 / data.len() as f64,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after each.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[LabeledImage<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if let Some(item) = data.iter().find(|d| d.label >= state.net.config.classes) {
        return Err(Error::InvalidClass { index: item.label, classes: state.net.config.classes });
    }
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let log = train_epoch(state, data, cfg)?;
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Class probabilities for every item, without augmentation.
pub fn predict_all<T: Scalar>(net: &AgNet<T>, data: &[LabeledImage<T>], cfg: &TrainConfig) -> Result<Vec<Vec<T>>> {
    data.par_iter()
        .map(|item| {
            let regions = regions_for_image(&item.image, cfg)?;
            Ok(net.predict(&item.image, &regions)?.probs.into_vec())
        })
        .collect()
}

pub fn evaluate<T: Scalar>(net: &AgNet<T>, data: &[LabeledImage<T>], cfg: &TrainConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probs = predict_all(net, data, cfg)?;
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    evaluate_predictions(&probs, &labels, net.config.classes)
}
