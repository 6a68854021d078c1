//! Difference-of-Gaussians keypoint detection (positions only).
//!
//! The detector builds a Gaussian scale space, takes differences of adjacent
//! levels, and keeps 3x3x3 extrema that pass a contrast threshold and the
//! principal-curvature edge test. No sub-pixel refinement, orientation or
//! descriptor is computed.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Smallest side accepted by [`detect_keypoints`].
pub const MIN_DETECT_SIDE: usize = 32;

/// Blur assumed to be already present in the input image.
const ASSUMED_INPUT_BLUR: f64 = 0.5;

/// Pyramid octaves stop once the next octave would drop below this side.
const MIN_OCTAVE_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T> {
    width: usize,
    height: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return shape_err("gray_image", format!("{width}x{height} with {} pixels", pixels.len()));
        }
        if pixels.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(Error::InvalidArgument("gray pixels must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    /// Unchecked constructor for intermediate scale-space levels, whose values
    /// may leave `[0, 1]`.
    fn raw(width: usize, height: usize, pixels: Vec<T>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// Copy rotated by 90 degrees clockwise.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.height, self.width);
        let pixels = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| self.get(y, self.height - 1 - x)).collect();
        Self::raw(w, h, pixels)
    }

    fn downsample(&self) -> Self {
        let (w, h) = (self.width.div_ceil(2), self.height.div_ceil(2));
        let pixels = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| self.get(2 * x, 2 * y)).collect();
        Self::raw(w, h, pixels)
    }
}

/// ITU-R BT.601 luma of an `[H, W, 3]` image with values in `[0, 1]`.
pub fn to_grayscale<T: Scalar>(rgb: &Tensor<T>) -> Result<GrayImage<T>> {
    let &[h, w, 3] = rgb.shape() else {
        return shape_err("to_grayscale", format!("expected [H, W, 3], got {:?}", rgb.shape()));
    };
    let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let pixels = rgb.data().chunks_exact(3).map(|px| (r * px[0] + g * px[1] + b * px[2]).max(T::zero()).min(T::one())).collect();
    GrayImage::new(w, h, pixels)
}

/// Index into `0..n` under reflect-101 padding (`d c b | a b c d | c b a`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel<T: Scalar>(sigma: f64) -> Vec<T> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur<T: Scalar>(img: &GrayImage<T>, sigma: f64) -> Result<GrayImage<T>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(blur(img, sigma))
}

fn blur<T: Scalar>(img: &GrayImage<T>, sigma: f64) -> GrayImage<T> {
    let kernel: Vec<T> = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        let row = &img.pixels[y * w..][..w];
        for x in 0..w {
            tmp[y * w + x] = kernel.iter().enumerate().map(|(k, &kv)| kv * row[reflect(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel.iter().enumerate().map(|(k, &kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    GrayImage::raw(w, h, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint<T> {
    pub x: T,
    pub y: T,
    /// Gaussian sigma of the detecting level, in base-image pixels.
    pub scale: T,
    /// Absolute DoG value at the extremum.
    pub response: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub octaves: usize,
    pub intervals_per_octave: usize,
    pub base_sigma: f64,
    pub contrast_threshold: f64,
    pub edge_ratio_threshold: f64,
    pub max_keypoints: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            octaves: 4,
            intervals_per_octave: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.03,
            edge_ratio_threshold: 10.0,
            max_keypoints: 500,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.octaves > 0
            && self.intervals_per_octave > 0
            && self.base_sigma > 0.0
            && self.contrast_threshold > 0.0
            && self.edge_ratio_threshold > 1.0
            && self.max_keypoints > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid detector config {self:?}")))
        }
    }
}

/// One octave of the difference-of-Gaussians stack.
struct DogOctave<T> {
    levels: Vec<GrayImage<T>>,
    /// Distance between adjacent octave pixels in base-image pixels.
    step: usize,
}

fn build_dog_pyramid<T: Scalar>(img: &GrayImage<T>, cfg: &DetectorConfig) -> Vec<DogOctave<T>> {
    let s = cfg.intervals_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let sigma0 = cfg.base_sigma;
    let initial = (sigma0 * sigma0 - ASSUMED_INPUT_BLUR * ASSUMED_INPUT_BLUR).max(0.01).sqrt();
    let increments: Vec<f64> = (1..s + 3)
        .map(|i| {
            let prev = sigma0 * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut octaves = Vec::with_capacity(cfg.octaves);
    let mut base = blur(img, initial);
    for o in 0..cfg.octaves {
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(base);
        for &inc in &increments {
            let next = blur(gauss.last().expect("nonempty"), inc);
            gauss.push(next);
        }
        let levels = gauss
            .windows(2)
            .map(|pair| {
                let px = pair[1].pixels.iter().zip(&pair[0].pixels).map(|(&a, &b)| a - b).collect();
                GrayImage::raw(pair[0].width, pair[0].height, px)
            })
            .collect();
        octaves.push(DogOctave { levels, step: 1 << o });
        let next = gauss[s].downsample();
        if next.width.min(next.height) < MIN_OCTAVE_SIDE {
            break;
        }
        base = next;
    }
    octaves
}

fn is_extremum<T: Scalar>(below: &GrayImage<T>, at: &GrayImage<T>, above: &GrayImage<T>, x: usize, y: usize) -> bool {
    let v = at.get(x, y);
    let (mut is_max, mut is_min) = (true, true);
    for (li, level) in [below, at, above].into_iter().enumerate() {
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if li == 1 && nx == x && ny == y {
                    continue;
                }
                let n = level.get(nx, ny);
                is_max &= v > n;
                is_min &= v < n;
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

/// Principal-curvature ratio test `tr(H)^2 / det(H) < (r + 1)^2 / r`.
fn passes_edge_test<T: Scalar>(d: &GrayImage<T>, x: usize, y: usize, r: f64) -> bool {
    let v = d.get(x, y).as_f64();
    let at = |dx: isize, dy: isize| d.get((x as isize + dx) as usize, (y as isize + dy) as usize).as_f64();
    let dxx = at(1, 0) + at(-1, 0) - 2.0 * v;
    let dyy = at(0, 1) + at(0, -1) - 2.0 * v;
    let dxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / 4.0;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    det > 0.0 && tr * tr * r < (r + 1.0) * (r + 1.0) * det
}

/// Detects DoG extrema and returns them sorted by descending response,
/// truncated to `cfg.max_keypoints`. Coordinates are in base-image pixels.
pub fn detect_keypoints<T: Scalar>(img: &GrayImage<T>, cfg: &DetectorConfig) -> Result<Vec<Keypoint<T>>> {
    cfg.validate()?;
    if img.width.min(img.height) < MIN_DETECT_SIDE {
        return Err(Error::ImageTooSmall { width: img.width, height: img.height, min: MIN_DETECT_SIDE });
    }
    let threshold = T::lit(cfg.contrast_threshold);
    let s = cfg.intervals_per_octave;
    let mut found = Vec::new();
    for (o, octave) in build_dog_pyramid(img, cfg).iter().enumerate() {
        for i in 1..=s {
            let (below, at, above) = (&octave.levels[i - 1], &octave.levels[i], &octave.levels[i + 1]);
            let scale = cfg.base_sigma * 2f64.powf(o as f64 + i as f64 / s as f64);
            for y in 1..at.height - 1 {
                for x in 1..at.width - 1 {
                    let v = at.get(x, y);
                    if v.abs() < threshold
                        || !is_extremum(below, at, above, x, y)
                        || !passes_edge_test(at, x, y, cfg.edge_ratio_threshold)
                    {
                        continue;
                    }
                    found.push(Keypoint {
                        x: T::from_usize_lossy(x * octave.step),
                        y: T::from_usize_lossy(y * octave.step),
                        scale: T::lit(scale),
                        response: v.abs(),
                    });
                }
            }
        }
    }
    found.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .expect("finite response")
            .then(a.scale.partial_cmp(&b.scale).expect("finite"))
            .then(a.y.partial_cmp(&b.y).expect("finite"))
            .then(a.x.partial_cmp(&b.x).expect("finite"))
    });
    found.dedup_by(|a, b| a.x == b.x && a.y == b.y && a.scale == b.scale);
    found.truncate(cfg.max_keypoints);
    Ok(found)
}
