//! Semantic-region proposal: keypoint clusters become primary boxes, every
//! unordered pair of primaries yields a secondary union box, and the whole
//! image is appended last.

use serde::{Deserialize, Serialize};

use crate::clustering::{fit_gmm, kmeans, ClusterAssignment, GmmConfig, GmmModel, Point};
use crate::error::{shape_err, Error, Result};
use crate::keypoints::{detect_keypoints, DetectorConfig, GrayImage, Keypoint};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Minimum primary box side in pixels at 224 resolution.
pub const DEFAULT_MIN_SIDE: f64 = 16.0;

/// Axis-aligned box in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0: x0.min(x1), y0: y0.min(y1), x1: x0.max(x1), y1: y0.max(y1) }
    }

    pub fn whole(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &Self) -> Self {
        Self { x0: self.x0.min(other.x0), y0: self.y0.min(other.y0), x1: self.x1.max(other.x1), y1: self.y1.max(other.y1) }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains(&self, other: &Self) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Grows each side symmetrically to at least `min_side`.
    pub fn expand_to(&self, min_side: f64) -> Self {
        let grow = |lo: f64, hi: f64| {
            if hi - lo >= min_side {
                (lo, hi)
            } else {
                let c = 0.5 * (lo + hi);
                (c - 0.5 * min_side, c + 0.5 * min_side)
            }
        };
        let (x0, x1) = grow(self.x0, self.x1);
        let (y0, y1) = grow(self.y0, self.y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn clip(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self { x0: self.x0.clamp(0.0, w), y0: self.y0.clamp(0.0, h), x1: self.x1.clamp(0.0, w), y1: self.y1.clamp(0.0, h) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    Keypoints,
    FeatureMap,
    GridFallback,
}

impl RegionSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Keypoints => "keypoints",
            Self::FeatureMap => "feature_map",
            Self::GridFallback => "grid_fallback",
        }
    }
}

/// `kappa` primary boxes, `kappa (kappa - 1) / 2` secondary boxes in
/// canonical `(i, j), i < j` order, and the whole image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub kappa: usize,
    pub primary: Vec<BoundingBox>,
    pub secondary: Vec<BoundingBox>,
    pub whole_image: BoundingBox,
    pub source: RegionSource,
}

/// `R = kappa + kappa (kappa - 1) / 2`.
pub fn region_count(kappa: usize) -> usize {
    kappa + kappa * kappa.saturating_sub(1) / 2
}

/// Canonical index pairs behind the secondary boxes.
pub fn secondary_pairs(kappa: usize) -> Vec<(usize, usize)> {
    (0..kappa).flat_map(|i| (i + 1..kappa).map(move |j| (i, j))).collect()
}

impl RegionSet {
    pub fn from_primary(primary: Vec<BoundingBox>, width: usize, height: usize, source: RegionSource) -> Self {
        let primary: Vec<_> = primary.iter().map(|b| b.clip(width, height)).collect();
        let secondary = secondary_regions(&primary);
        Self { kappa: primary.len(), primary, secondary, whole_image: BoundingBox::whole(width, height), source }
    }

    /// Number of semantic regions `R`, excluding the whole image.
    pub fn len(&self) -> usize {
        self.primary.len() + self.secondary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primary, then secondary, then the whole image (`R + 1` boxes).
    pub fn all_boxes(&self) -> Vec<BoundingBox> {
        let mut boxes = Vec::with_capacity(self.len() + 1);
        boxes.extend_from_slice(&self.primary);
        boxes.extend_from_slice(&self.secondary);
        boxes.push(self.whole_image);
        boxes
    }
}

/// Axis-aligned extent of each cluster's member points, grown to `min_side`
/// and clipped to the image. A cluster without members is centred on its
/// responsibility-weighted mean.
pub fn primary_regions<T: Scalar>(
    assignment: &ClusterAssignment<T>,
    points: &[Point<T>],
    width: usize,
    height: usize,
    min_side: f64,
) -> Result<Vec<BoundingBox>> {
    if assignment.labels.len() != points.len() {
        return shape_err("primary_regions", format!("{} labels for {} points", assignment.labels.len(), points.len()));
    }
    let k = assignment.responsibilities.first().map_or(0, Vec::len);
    let mut boxes = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<[f64; 2]> = points
            .iter()
            .zip(&assignment.labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| [p[0].as_f64(), p[1].as_f64()])
            .collect();
        let raw = if members.is_empty() {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for (p, r) in points.iter().zip(&assignment.responsibilities) {
                let w = r[c].as_f64();
                sx += w * p[0].as_f64();
                sy += w * p[1].as_f64();
                sw += w;
            }
            let (cx, cy) = if sw > 0.0 { (sx / sw, sy / sw) } else { (width as f64 / 2.0, height as f64 / 2.0) };
            BoundingBox::new(cx, cy, cx, cy)
        } else {
            let fold = |f: fn(f64, f64) -> f64, axis: usize, init: f64| members.iter().map(|m| m[axis]).fold(init, f);
            BoundingBox::new(
                fold(f64::min, 0, f64::INFINITY),
                fold(f64::min, 1, f64::INFINITY),
                fold(f64::max, 0, f64::NEG_INFINITY),
                fold(f64::max, 1, f64::NEG_INFINITY),
            )
        };
        boxes.push(raw.expand_to(min_side).clip(width, height));
    }
    Ok(boxes)
}

/// Union box for every unordered pair `(i, j), i < j`, lexicographically.
pub fn secondary_regions(primary: &[BoundingBox]) -> Vec<BoundingBox> {
    secondary_pairs(primary.len()).into_iter().map(|(i, j)| primary[i].union(&primary[j])).collect()
}

/// `kappa` cells of a `ceil(sqrt(kappa))`-column grid, row-major, with any
/// extra cells dropped.
pub fn grid_regions(kappa: usize, width: usize, height: usize) -> Vec<BoundingBox> {
    if kappa == 0 {
        return Vec::new();
    }
    let cols = (kappa as f64).sqrt().ceil() as usize;
    let rows = kappa.div_ceil(cols);
    let (cw, ch) = (width as f64 / cols as f64, height as f64 / rows as f64);
    (0..kappa)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            BoundingBox::new(c as f64 * cw, r as f64 * ch, (c + 1) as f64 * cw, (r + 1) as f64 * ch)
        })
        .collect()
}

/// Everything produced while proposing regions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal<T> {
    pub regions: RegionSet,
    pub keypoints: Vec<Keypoint<T>>,
    pub gmm: Option<GmmModel<T>>,
}

/// Detect, cluster and box. Falls back to a uniform grid when the image
/// yields fewer than `kappa` keypoints.
pub fn propose_regions<T: Scalar>(
    img: &GrayImage<T>,
    detector: &DetectorConfig,
    gmm: &GmmConfig,
    kappa: usize,
    min_side: f64,
) -> Result<RegionProposal<T>> {
    if kappa == 0 {
        return Err(Error::InvalidArgument("kappa must be at least 1".into()));
    }
    let (w, h) = (img.width(), img.height());
    let keypoints = detect_keypoints(img, detector)?;
    if keypoints.len() < kappa {
        let regions = RegionSet::from_primary(grid_regions(kappa, w, h), w, h, RegionSource::GridFallback);
        return Ok(RegionProposal { regions, keypoints, gmm: None });
    }
    let points: Vec<Point<T>> = keypoints.iter().map(|k| [k.x, k.y]).collect();
    let cfg = GmmConfig { k: kappa, ..gmm.clone() };
    let (model, assignment) = fit_gmm(&points, &cfg)?;
    let primary = primary_regions(&assignment, &points, w, h, min_side)?;
    let regions = RegionSet::from_primary(primary, w, h, RegionSource::Keypoints);
    Ok(RegionProposal { regions, keypoints, gmm: Some(model) })
}

pub fn build_region_set<T: Scalar>(
    img: &GrayImage<T>,
    detector: &DetectorConfig,
    gmm: &GmmConfig,
    kappa: usize,
) -> Result<RegionSet> {
    Ok(propose_regions(img, detector, gmm, kappa, DEFAULT_MIN_SIDE)?.regions)
}

/// Regions from k-means over the channel vectors of an `[H, W, C]` feature
/// map: each group's spatial extent, in feature cells, scaled to the image.
pub fn cluster_feature_map<T: Scalar>(
    map: &Tensor<T>,
    kappa: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<RegionSet> {
    let &[fh, fw, c] = map.shape() else {
        return shape_err("cluster_feature_map", format!("expected [H, W, C], got {:?}", map.shape()));
    };
    if fh * fw < kappa {
        return Err(Error::TooFewPoints { needed: kappa, got: fh * fw });
    }
    let km = kmeans(map.data(), c, kappa, seed)?;
    let (sx, sy) = (width as f64 / fw as f64, height as f64 / fh as f64);
    let cell_box = |cell: usize| {
        let (y, x) = (cell / fw, cell % fw);
        BoundingBox::new(x as f64 * sx, y as f64 * sy, (x + 1) as f64 * sx, (y + 1) as f64 * sy)
    };
    let primary = (0..kappa)
        .map(|g| {
            let members = km.labels.iter().enumerate().filter(|(_, &l)| l == g).map(|(i, _)| cell_box(i));
            members.reduce(|a, b| a.union(&b)).unwrap_or_else(|| {
                let centroid = km.centroid(g);
                let closest = (0..fh * fw)
                    .map(|i| (i, sq_dist_row(&map.data()[i * c..][..c], centroid)))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                    .0;
                cell_box(closest)
            })
        })
        .collect();
    Ok(RegionSet::from_primary(primary, width, height, RegionSource::FeatureMap))
}

fn sq_dist_row<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum()
}
