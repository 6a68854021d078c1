//! Subcommand implementations. Each returns its result so that tests can
//! drive them without spawning the binary.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use agnet::keypoints::Keypoint;
use agnet::net::AgNet;
use agnet::regions::{BoundingBox, RegionSource};
use agnet::training::{evaluate, train_epoch, EpochLog, EvalReport, TrainConfig, TrainState};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{decode_rgb, ingest_dataset, load_split, rgb_to_tensor, Split};
use crate::error::{io_err, CliError, Result};

/// Scalar type used by every command; checkpoints store 32-bit floats, so
/// training in `f32` keeps resume bit-exact.
pub type Real = f32;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    /// Top-1 on the un-augmented training split after the last epoch.
    pub train_top1: f64,
    pub state: TrainState<Real>,
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("{key} is not set (config file or --set {key}=...)")))
}

fn mismatch(what: &'static str, checkpoint: impl ToString, other_name: &'static str, other: impl ToString) -> CliError {
    CliError::Mismatch { what, checkpoint: checkpoint.to_string(), other_name, other: other.to_string() }
}

pub fn resolve_config(config: &Path, opts: &TrainOptions) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply_overrides(&opts.overrides)?;
    if let Some(e) = opts.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Trains from a config file, checkpointing after every epoch and appending
/// to the CSV log.
pub fn cmd_train(config: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    run_training(&resolve_config(config, opts)?, opts.resume.as_deref())
}

pub fn run_training(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let dataset = require(&cfg.dataset, "run.dataset")?;
    let ckpt_path = require(&cfg.checkpoint, "run.checkpoint")?.to_path_buf();
    let manifest = ingest_dataset(dataset)?;
    let classes = manifest.classes.len();
    let net_cfg = cfg.model.net_config(classes);
    net_cfg.validate()?;
    let data = load_split::<Real>(&manifest, Split::Train, cfg.train.image_size)?;

    let mut state = match resume {
        Some(path) => {
            let ck = load_checkpoint::<Real>(path)?;
            if ck.meta.classes != classes {
                return Err(mismatch("class-count", ck.meta.classes, "dataset", classes));
            }
            if ck.meta.net != net_cfg {
                return Err(mismatch("architecture", format!("{:?}", ck.meta.net), "config", format!("{net_cfg:?}")));
            }
            if ck.meta.kappa != cfg.train.kappa {
                return Err(mismatch("kappa", ck.meta.kappa, "config", cfg.train.kappa));
            }
            ck.state
        }
        None => TrainState::new(AgNet::new(net_cfg.clone(), cfg.train.seed)?, &cfg.train)?,
    };
    let meta = CheckpointMeta::new(&net_cfg, &cfg.train, manifest.classes.clone(), state.epoch);

    let mut log = match &cfg.log {
        Some(p) => {
            let fresh = resume.is_none() || !p.exists();
            let mut f = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(p).map_err(io_err(p))?;
            if fresh {
                writeln!(f, "{}", EpochLog::CSV_HEADER).map_err(io_err(p))?;
            }
            Some((p.clone(), f))
        }
        None => None,
    };
    save_checkpoint(&ckpt_path, &meta, &state)?;
    let mut logs = Vec::new();
    while state.epoch < cfg.train.epochs {
        let entry = train_epoch(&mut state, &data, &cfg.train)?;
        eprintln!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  train top-1 {:.2}  ({:.1}s)",
            entry.epoch,
            entry.lr,
            entry.train_loss,
            100.0 * entry.train_top1,
            entry.wall_seconds
        );
        if let Some((p, f)) = log.as_mut() {
            writeln!(f, "{}", entry.csv_row()).map_err(io_err(p))?;
        }
        save_checkpoint(&ckpt_path, &meta, &state)?;
        logs.push(entry);
    }
    let train_top1 = evaluate(&state.net, &data, &cfg.train)?.top1;
    Ok(TrainOutcome { logs, checkpoint: ckpt_path, train_top1, state })
}

/// Evaluation result with the class names it refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: Split,
    pub epoch: usize,
    pub class_names: Vec<String>,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// The three headline metrics as percentages with two decimals.
pub fn format_report(r: &EvalReport) -> String {
    format!("top-1: {:.2}\ntop-5: {:.2}\nmAP: {:.2}", 100.0 * r.top1, 100.0 * r.top5, 100.0 * r.map)
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, split: Split, out: Option<&Path>) -> Result<EvalOutput> {
    let ck = load_checkpoint::<Real>(checkpoint)?;
    let manifest = ingest_dataset(dataset)?;
    if ck.meta.classes != manifest.classes.len() {
        return Err(mismatch("class-count", ck.meta.classes, "dataset", manifest.classes.len()));
    }
    let data = load_split::<Real>(&manifest, split, ck.meta.image_size)?;
    let report = evaluate(&ck.state.net, &data, &ck.meta.train)?;
    let output = EvalOutput { split, epoch: ck.meta.epoch, class_names: manifest.classes, report };
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&output)?).map_err(io_err(p))?;
    }
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmJson {
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub weights: Vec<f64>,
}

/// JSON shape written by `inspect-regions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub width: usize,
    pub height: usize,
    pub kappa: usize,
    pub source: RegionSource,
    pub keypoints: Vec<Keypoint<f64>>,
    pub gmm: Option<GmmJson>,
    pub primary: Vec<BoundingBox>,
    pub secondary: Vec<BoundingBox>,
    pub whole: BoundingBox,
    /// Semantic regions `R`, not counting the whole image.
    pub region_count: usize,
}

/// Region settings for `inspect-regions` and `visualize`: defaults, then an
/// optional config file, then `--set` overrides, then `--kappa`.
pub fn region_settings(config: Option<&Path>, overrides: &[String], kappa: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(k) = kappa {
        cfg.train.kappa = k;
    }
    cfg.train.validate()?;
    Ok(cfg.train)
}

/// Proposes regions for one image at its native resolution.
pub fn inspect_image(img: &RgbImage, cfg: &TrainConfig) -> Result<RegionReport> {
    let tensor = rgb_to_tensor::<f64>(img, None);
    let p = agnet::training::propose_for_image(&tensor, cfg)?;
    let r = p.regions;
    Ok(RegionReport {
        width: img.width() as usize,
        height: img.height() as usize,
        kappa: r.kappa,
        source: r.source,
        keypoints: p.keypoints,
        gmm: p.gmm.map(|g| GmmJson { means: g.means, covariances: g.covariances, weights: g.weights }),
        region_count: r.len(),
        primary: r.primary,
        secondary: r.secondary,
        whole: r.whole_image,
    })
}

pub fn cmd_inspect_regions(image: &Path, cfg: &TrainConfig, out: Option<&Path>) -> Result<RegionReport> {
    let report = inspect_image(&decode_rgb(image)?, cfg)?;
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).map_err(io_err(p))?;
    }
    Ok(report)
}

/// Solid colours for primary boxes, cycled when there are more boxes.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [255, 128, 0],
    [128, 0, 255],
];
pub const KEYPOINT_COLOR: [u8; 3] = [255, 255, 255];
pub const SECONDARY_COLOR: [u8; 3] = [0, 0, 0];

/// Inclusive pixel rectangle covered by a box outline.
pub fn pixel_rect(b: &BoundingBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let clamp = |v: f64, hi: u32| (v.round().max(0.0) as u32).min(hi - 1);
    let (x0, y0) = (clamp(b.x0, width), clamp(b.y0, height));
    let (x1, y1) = (clamp(b.x1 - 1.0, width).max(x0), clamp(b.y1 - 1.0, height).max(y0));
    (x0, y0, x1, y1)
}

/// Outline pixels of `pixel_rect`, in drawing order.
pub fn outline(rect: (u32, u32, u32, u32)) -> Vec<(u32, u32)> {
    let (x0, y0, x1, y1) = rect;
    let mut pts: Vec<(u32, u32)> = (x0..=x1).flat_map(|x| [(x, y0), (x, y1)]).collect();
    pts.extend((y0..=y1).flat_map(|y| [(x0, y), (x1, y)]));
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Draws keypoints as 3x3 dots, primary boxes in palette colours and the
/// chosen secondary box dashed.
pub fn render_overlay(img: &RgbImage, report: &RegionReport, secondary: Option<usize>) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = out.dimensions();
    for kp in &report.keypoints {
        let (cx, cy) = (kp.x.round() as i64, kp.y.round() as i64);
        for (dx, dy) in (-1..=1).flat_map(|dx| (-1..=1).map(move |dy| (dx, dy))) {
            let (x, y) = (cx + dx, cy + dy);
            if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                out.put_pixel(x as u32, y as u32, Rgb(KEYPOINT_COLOR));
            }
        }
    }
    if let Some(b) = secondary.and_then(|i| report.secondary.get(i)) {
        for (x, y) in outline(pixel_rect(b, w, h)) {
            if (x + y) / 3 % 2 == 0 {
                out.put_pixel(x, y, Rgb(SECONDARY_COLOR));
            }
        }
    }
    for (i, b) in report.primary.iter().enumerate() {
        for (x, y) in outline(pixel_rect(b, w, h)) {
            out.put_pixel(x, y, Rgb(PALETTE[i % PALETTE.len()]));
        }
    }
    out
}

pub fn cmd_visualize(image: &Path, cfg: &TrainConfig, secondary: Option<usize>, out: &Path) -> Result<RegionReport> {
    let img = decode_rgb(image)?;
    let report = inspect_image(&img, cfg)?;
    render_overlay(&img, &report, secondary).save(out).map_err(|source| CliError::Image { path: out.to_path_buf(), source })?;
    Ok(report)
}
