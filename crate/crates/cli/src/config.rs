//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix: `train.*` (optimisation, augmentation and
//! region settings), `detector.*`, `gmm.*`, `model.*` (architecture and
//! ablation switches) and `run.*` (paths). `#` starts a comment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use agnet::net::{Ablation, NetConfig, PoolingMode, RegionSelection};
use agnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

/// Architecture settings; the class count comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    /// Widths of the backbone stages before the last one.
    pub stages: Vec<usize>,
    /// Feature width `C` (output of the last backbone stage).
    pub channels: usize,
    pub inter_dim: Option<usize>,
    pub ablation: Ablation,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { stages: vec![16, 32, 64, 96], channels: 96, inter_dim: None, ablation: Ablation::default() }
    }
}

impl ModelSettings {
    pub fn net_config(&self, classes: usize) -> NetConfig {
        let mut backbone_channels = self.stages.clone();
        backbone_channels.push(self.channels);
        NetConfig { backbone_channels, classes, inter_dim: self.inter_dim, ablation: self.ablation }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelSettings,
    /// Dataset root in the ingest layout.
    pub dataset: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// CSV epoch log.
    pub log: Option<PathBuf>,
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?} as {}", std::any::type_name::<T>()))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {value:?}")),
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let d = &mut t.detector;
        let g = &mut t.gmm;
        let m = &mut self.model;
        match key {
            "train.epochs" => t.epochs = parse(value)?,
            "train.batch_size" => t.batch_size = parse(value)?,
            "train.lr" => t.lr = parse(value)?,
            "train.momentum" => t.momentum = parse(value)?,
            "train.decay_factor" => t.decay_factor = parse(value)?,
            "train.decay_every" => t.decay_every = parse(value)?,
            "train.max_translation" => t.augment.max_translation = parse(value)?,
            "train.max_rotation_degrees" => t.augment.max_rotation_degrees = parse(value)?,
            "train.scale_min" => t.augment.scale_min = parse(value)?,
            "train.scale_max" => t.augment.scale_max = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "train.kappa" => t.kappa = parse(value)?,
            "train.image_size" => t.image_size = parse(value)?,
            "train.region_min_side" => t.region_min_side = parse(value)?,
            "detector.octaves" => d.octaves = parse(value)?,
            "detector.intervals_per_octave" => d.intervals_per_octave = parse(value)?,
            "detector.base_sigma" => d.base_sigma = parse(value)?,
            "detector.contrast_threshold" => d.contrast_threshold = parse(value)?,
            "detector.edge_ratio_threshold" => d.edge_ratio_threshold = parse(value)?,
            "detector.max_keypoints" => d.max_keypoints = parse(value)?,
            "gmm.k" => return Err("the component count is train.kappa".into()),
            "gmm.covariance_regularization" => g.covariance_regularization = parse(value)?,
            "gmm.max_iterations" => g.max_iterations = parse(value)?,
            "gmm.convergence_threshold" => g.convergence_threshold = parse(value)?,
            "gmm.seed" => g.seed = parse(value)?,
            "model.stages" => m.stages = parse_list(value)?,
            "model.channels" => m.channels = parse(value)?,
            "model.inter_dim" => m.inter_dim = Some(parse(value)?),
            "model.self_attention" => m.ablation.self_attention = parse_bool(value)?,
            "model.se_residual" => m.ablation.se_residual = parse_bool(value)?,
            "model.inter_attention" => m.ablation.inter_attention = parse_bool(value)?,
            "model.regions" => {
                m.ablation.regions = match value {
                    "all" => RegionSelection::All,
                    "primary_only" => RegionSelection::PrimaryOnly,
                    "secondary_only" => RegionSelection::SecondaryOnly,
                    "whole_image_only" => RegionSelection::WholeImageOnly,
                    _ => return Err(format!("unknown region selection {value:?}")),
                }
            }
            "model.pooling" => {
                m.ablation.pooling = match value {
                    "fused" => PoolingMode::Fused,
                    "gmp_only" => PoolingMode::GmpOnly,
                    "gap_only" => PoolingMode::GapOnly,
                    _ => return Err(format!("unknown pooling mode {value:?}")),
                }
            }
            "run.dataset" => self.dataset = Some(PathBuf::from(value)),
            "run.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "run.log" => self.log = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses config text; `path` is used for error messages and to resolve
    /// relative `run.*` paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Config { path: path.to_path_buf(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.checkpoint, &mut cfg.log].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
        }
        Ok(())
    }
}
