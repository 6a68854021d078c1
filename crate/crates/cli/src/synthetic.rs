//! Two-or-more-class synthetic dataset whose classes differ only in where
//! the bright blobs sit.

use std::path::{Path, PathBuf};

use agnet::keypoints::{detect_keypoints, to_grayscale, DetectorConfig};
use agnet::training::derive_seed;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::rgb_to_tensor;
use crate::error::{io_err, CliError, Result};

/// Keypoints every generated image must yield under the default detector.
pub const MIN_KEYPOINTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// At most 4: upper-left, lower-right, upper-right, lower-left.
    pub classes: usize,
    /// Training images per class; the test split gets a quarter of this.
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { classes: 2, per_class: 64, size: 64, seed: 0 }
    }
}

impl SyntheticConfig {
    pub fn test_per_class(&self) -> usize {
        (self.per_class / 4).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub train: usize,
    pub test: usize,
    pub min_keypoints: usize,
}

pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

/// Quadrant origin (in units of half the image) for class `c`.
fn quadrant(c: usize) -> (f64, f64) {
    [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)][c]
}

/// Background shared by every class: a smooth random lattice, bilinearly
/// upsampled, fine grain and bright and dark speckles scattered over the whole frame.
fn texture<R: Rng>(size: usize, rng: &mut R) -> Vec<f64> {
    let cells = 8;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let step = size as f64 / cells as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / step, y as f64 / step);
            let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
            let (ax, ay) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let smooth = (1.0 - ay) * ((1.0 - ax) * at(ix, iy) + ax * at(ix + 1, iy))
                + ay * ((1.0 - ax) * at(ix, iy + 1) + ax * at(ix + 1, iy + 1));
            out.push(0.18 + smooth + rng.gen_range(-0.015..0.015));
        }
    }
    let speckles = rng.gen_range(SPECKLES.0..=SPECKLES.1) * size * size / (64 * 64);
    for _ in 0..speckles {
        let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let sigma = rng.gen_range(2.5..3.5);
        let amp = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.3..0.45);
        splat(&mut out, size, cx, cy, sigma, amp);
    }
    out
}

const SPECKLES: (usize, usize) = (14, 20);

fn splat(plane: &mut [f64], size: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as i64;
    for y in (cy as i64 - r).max(0)..=(cy as i64 + r).min(size as i64 - 1) {
        for x in (cx as i64 - r).max(0)..=(cx as i64 + r).min(size as i64 - 1) {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            plane[y as usize * size + x as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Renders one image of class `c`.
pub fn render<R: Rng>(c: usize, size: usize, rng: &mut R) -> RgbImage {
    let base = texture(size, rng);
    let half = size as f64 / 2.0;
    let (qx, qy) = quadrant(c);
    let blobs = rng.gen_range(2..=4);
    let mut channels = [base.clone(), base.clone(), base];
    for _ in 0..blobs {
        let sigma = rng.gen_range(2.5..4.0) * size as f64 / 64.0;
        let margin = 2.0 * sigma;
        let cx = qx * half + rng.gen_range(margin..half - margin);
        let cy = qy * half + rng.gen_range(margin..half - margin);
        let amp = rng.gen_range(0.5..0.8);
        let tint = [1.0, rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)];
        for (ch, plane) in channels.iter_mut().enumerate() {
            splat(plane, size, cx, cy, sigma, amp * tint[ch]);
        }
    }
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        image::Rgb(channels.each_ref().map(|p| (p[i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn keypoint_count(img: &RgbImage) -> Result<usize> {
    let gray = to_grayscale(&rgb_to_tensor::<f64>(img, None))?;
    Ok(detect_keypoints(&gray, &DetectorConfig::default())?.len())
}

/// Writes the dataset in the ingest layout. Each image is re-drawn until the
/// detector finds at least [`MIN_KEYPOINTS`] keypoints in it.
pub fn generate_synthetic(out: &Path, cfg: &SyntheticConfig) -> Result<SyntheticSummary> {
    if !(2..=4).contains(&cfg.classes) || cfg.per_class == 0 || cfg.size < 32 {
        return Err(CliError::Usage(format!("synthetic data needs 2-4 classes, per_class >= 1 and size >= 32: {cfg:?}")));
    }
    let mut summary = SyntheticSummary { train: 0, test: 0, min_keypoints: usize::MAX };
    for (split_idx, (split, count)) in [("train", cfg.per_class), ("test", cfg.test_per_class())].into_iter().enumerate() {
        for c in 0..cfg.classes {
            let dir: PathBuf = out.join(split).join(class_name(c));
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for i in 0..count {
                let stream = ((split_idx * cfg.classes + c) * 1_000_000 + i) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, 0));
                let (img, kps) = loop {
                    let img = render(c, cfg.size, &mut rng);
                    let kps = keypoint_count(&img)?;
                    if kps >= MIN_KEYPOINTS {
                        break (img, kps);
                    }
                };
                summary.min_keypoints = summary.min_keypoints.min(kps);
                let path = dir.join(format!("{i:04}.png"));
                img.save(&path).map_err(|source| CliError::Image { path: path.clone(), source })?;
                if split_idx == 0 {
                    summary.train += 1;
                } else {
                    summary.test += 1;
                }
            }
        }
    }
    Ok(summary)
}
