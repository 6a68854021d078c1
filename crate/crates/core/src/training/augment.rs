use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Sampling ranges for random affine augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of each image dimension.
    pub max_translation: f64,
    pub max_rotation_degrees: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_translation: 0.15, max_rotation_degrees: 15.0, scale_min: 0.85, scale_max: 1.15 }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self { max_translation: 0.0, max_rotation_degrees: 0.0, scale_min: 1.0, scale_max: 1.0 }
    }
}

/// One concrete similarity transform about the image centre:
/// `out = c + scale * R(rotation) (in - c) + (tx, ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub tx: f64,
    pub ty: f64,
    /// Radians, counter-clockwise in image coordinates (y down).
    pub rotation: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Self = Self { tx: 0.0, ty: 0.0, rotation: 0.0, scale: 1.0 };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let tx = uniform(-cfg.max_translation, cfg.max_translation) * width as f64;
        let ty = uniform(-cfg.max_translation, cfg.max_translation) * height as f64;
        let rotation = uniform(-cfg.max_rotation_degrees, cfg.max_rotation_degrees).to_radians();
        let scale = uniform(cfg.scale_min, cfg.scale_max);
        Self { tx, ty, rotation, scale }
    }

    /// Source position for output pixel `(x, y)` (pixel-centre indices).
    pub fn source_of(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (dx, dy) = (x - cx - self.tx, y - cy - self.ty);
        let (s, c) = self.rotation.sin_cos();
        // Inverse rotation, then inverse scale.
        ((c * dx + s * dy) / self.scale + cx, (-s * dx + c * dy) / self.scale + cy)
    }
}

/// Reflects a continuous coordinate into `[0, n - 1]` without repeating the
/// edge sample.
fn reflect(mut p: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    p = p.rem_euclid(period);
    if p > last {
        period - p
    } else {
        p
    }
}

/// Warps an `[H, W, C]` image with bilinear sampling and reflect padding;
/// values are clamped to `[0, 1]`.
pub fn warp_affine<T: Scalar>(img: &Tensor<T>, t: &Affine) -> Result<Tensor<T>> {
    let &[h, w, c] = img.shape() else {
        return shape_err("warp_affine", format!("expected [H, W, C], got {:?}", img.shape()));
    };
    if *t == Affine::IDENTITY {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source_of(x as f64, y as f64, w, h);
            let (sx, sy) = (reflect(sx, w), reflect(sy, h));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (T::lit(sx - x0 as f64), T::lit(sy - y0 as f64));
            let (bx, by) = (T::one() - ax, T::one() - ay);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let v = by * (bx * at(y0, x0) + ax * at(y0, x1)) + ay * (bx * at(y1, x0) + ax * at(y1, x1));
                out.push(v.max(T::zero()).min(T::one()));
            }
        }
    }
    Tensor::new(img.shape(), out)
}

/// Samples a transform from `cfg` and applies it.
pub fn augment<T: Scalar, R: Rng + ?Sized>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<T>> {
    let &[h, w, _] = img.shape() else {
        return shape_err("augment", format!("expected [H, W, C], got {:?}", img.shape()));
    };
    warp_affine(img, &Affine::sample(cfg, w, h, rng))
}
