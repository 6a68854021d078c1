//! Differentiable building blocks of the network. Each layer takes tape
//! handles so it can be used for both inference and training.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::net::params::{FusionVars, InterVars, PoolingMode, SeVars, SelfAttentionVars};
use crate::numerics::{concat, stack, Tap, Var};
use crate::regions::BoundingBox;
use crate::scalar::Scalar;

/// Side length of pooled region maps.
pub const POOL_SIZE: usize = 7;

/// Stride-2, padding-1 3x3 convolutions, each followed by bias and ReLU.
pub fn backbone_forward<'t, T: Scalar>(image: Var<'t, T>, stages: &[(Var<'t, T>, Var<'t, T>)]) -> Result<Var<'t, T>> {
    let shape = image.shape();
    let factor = 1usize << stages.len();
    match shape.as_slice() {
        &[h, w, 3] if h % factor == 0 && w % factor == 0 => {}
        other => return shape_err("backbone_forward", format!("image {other:?} needs [H, W, 3] with H, W divisible by {factor}")),
    }
    let mut x = image;
    for &(kernel, bias) in stages {
        x = x.conv2d(kernel, 2, 1)?.add_bias(bias)?.relu();
    }
    Ok(x)
}

/// Position-to-position attention over an `[H, W, C]` map with a scaled
/// residual: `o = delta * (t^T h) W_v + x`, where `t` is the softmax over
/// key positions of `f g^T`.
pub fn self_attention<'t, T: Scalar>(x: Var<'t, T>, p: &SelfAttentionVars<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let &[h, w, c] = shape.as_slice() else {
        return shape_err("self_attention", format!("expected [H, W, C], got {shape:?}"));
    };
    if p.w_f.shape().first() != Some(&c) {
        return shape_err("self_attention", format!("input has {c} channels, weights {:?}", p.w_f.shape()));
    }
    let flat = x.reshape(&[h * w, c])?;
    let f = flat.matmul(p.w_f)?;
    let g = flat.matmul(p.w_g)?;
    let values = flat.matmul(p.w_h)?;
    // t[i, j]: weight of position i when producing output position j.
    let t = f.matmul(g.transpose()?)?.softmax(0)?;
    let s = t.transpose()?.matmul(values)?;
    let projected = s.matmul(p.w_v)?.mul_scalar(p.delta)?;
    projected.add(flat)?.reshape(&[h, w, c])
}

/// Bilinear taps pooling `bx` (image coordinates) from an `fh x fw` map to a
/// `POOL_SIZE x POOL_SIZE` grid. Destination indices are offset by
/// `dst_base * POOL_SIZE^2`.
pub fn roi_taps<T: Scalar>(
    bx: &BoundingBox,
    image_width: usize,
    image_height: usize,
    fh: usize,
    fw: usize,
    dst_base: usize,
) -> Vec<Tap<T>> {
    let axis = |lo: f64, hi: f64, image: usize, feat: usize| -> (f64, f64) {
        let scale = feat as f64 / image as f64;
        let (a, b) = (lo * scale, hi * scale);
        if b - a > 0.0 {
            (a, b)
        } else {
            let mid = 0.5 * (a + b);
            (mid - 0.5, mid + 0.5)
        }
    };
    let (x0, x1) = axis(bx.x0, bx.x1, image_width, fw);
    let (y0, y1) = axis(bx.y0, bx.y1, image_height, fh);
    let n = POOL_SIZE as f64;
    // Sample coordinate in pixel-centre convention, clamped to the border.
    let lerp = |lo: f64, hi: f64, i: usize, extent: usize| -> (usize, usize, f64) {
        let p = (lo + (i as f64 + 0.5) * (hi - lo) / n - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut taps = Vec::with_capacity(POOL_SIZE * POOL_SIZE * 4);
    for u in 0..POOL_SIZE {
        let (r0, r1, ay) = lerp(y0, y1, u, fh);
        for v in 0..POOL_SIZE {
            let (c0, c1, ax) = lerp(x0, x1, v, fw);
            let dst = dst_base * POOL_SIZE * POOL_SIZE + u * POOL_SIZE + v;
            for (r, wy) in [(r0, 1.0 - ay), (r1, ay)] {
                for (c, wx) in [(c0, 1.0 - ax), (c1, ax)] {
                    let weight = wy * wx;
                    if weight != 0.0 {
                        taps.push(Tap { dst, src: r * fw + c, weight: T::lit(weight) });
                    }
                }
            }
        }
    }
    taps
}

/// Pools every box from an `[H, W, C]` map into `[boxes, 7, 7, C]`.
pub fn roi_pool<'t, T: Scalar>(
    map: Var<'t, T>,
    boxes: &[BoundingBox],
    image_width: usize,
    image_height: usize,
) -> Result<Var<'t, T>> {
    let shape = map.shape();
    let &[fh, fw, c] = shape.as_slice() else {
        return shape_err("roi_pool", format!("expected [H, W, C], got {shape:?}"));
    };
    if boxes.is_empty() {
        return shape_err("roi_pool", "no boxes");
    }
    let taps: Vec<Tap<T>> = boxes
        .iter()
        .enumerate()
        .flat_map(|(i, b)| roi_taps(b, image_width, image_height, fh, fw, i))
        .collect();
    map.resample(Arc::new(taps), &[boxes.len(), POOL_SIZE, POOL_SIZE, c])
}

/// Channel gating of `[n, H, W, C]` region maps with a residual path:
/// `f * g + f`, `g = sigmoid(W2 relu(W1 GAP(f) + b1) + b2)`.
pub fn se_residual<'t, T: Scalar>(maps: Var<'t, T>, p: &SeVars<'t, T>) -> Result<Var<'t, T>> {
    let shape = maps.shape();
    let &[n, h, w, c] = shape.as_slice() else {
        return shape_err("se_residual", format!("expected [n, H, W, C], got {shape:?}"));
    };
    let pooled = maps.reshape(&[n, h * w, c])?.mean_axis(1)?;
    let hidden = pooled.matmul(p.w_squeeze)?.add_bias(p.b_squeeze)?.relu();
    let gate = hidden.matmul(p.w_excite)?.add_bias(p.b_excite)?.sigmoid();
    maps.mul_gate(gate)?.add(maps)
}

/// Global average pooling of `[n, H, W, C]` maps to `[n, C]`.
fn region_vectors<'t, T: Scalar>(maps: Var<'t, T>) -> Result<(Var<'t, T>, [usize; 4])> {
    let shape = maps.shape();
    let &[n, h, w, c] = shape.as_slice() else {
        return shape_err("region_vectors", format!("expected [n, H, W, C], got {shape:?}"));
    };
    Ok((maps.reshape(&[n, h * w, c])?.mean_axis(1)?, [n, h, w, c]))
}

/// Pairwise region similarity `M[r, r'] = sigmoid(W_m tanh(W_u v_r + W_u' v_r' + b_u) + b_m)`
/// on pooled region vectors, and attended maps `alpha_r = sum_r' M[r, r'] f_r'`.
/// Returns `(M, alpha)` with shapes `[n, n]` and `[n, H, W, C]`.
pub fn inter_attention<'t, T: Scalar>(maps: Var<'t, T>, p: &InterVars<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (v, [n, h, w, c]) = region_vectors(maps)?;
    let focus = v.matmul(p.w_u)?;
    let context = v.matmul(p.w_u_prime)?;
    let d = focus.shape()[1];
    let u = focus.pairwise_add(context)?.add_bias(p.b_u)?.tanh();
    let m = u.reshape(&[n * n, d])?.matmul(p.w_m)?.add_bias(p.b_m)?.sigmoid().reshape(&[n, n])?;
    let alpha = m.matmul(maps.reshape(&[n, h * w * c])?)?.reshape(&[n, h, w, c])?;
    Ok((m, alpha))
}

/// Importance-weighted sum of attended maps: `w = softmax_r(W_alpha GAP(alpha_r) + b_alpha)`.
/// Returns `(w, f_hat)` with shapes `[n]` and `[H, W, C]`.
pub fn aggregate_regions<'t, T: Scalar>(
    alpha: Var<'t, T>,
    w_alpha: Var<'t, T>,
    b_alpha: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (v, [n, h, w, c]) = region_vectors(alpha)?;
    let weights = v.matmul(w_alpha)?.add_bias(b_alpha)?.reshape(&[1, n])?.softmax(1)?;
    let fused = weights.matmul(alpha.reshape(&[n, h * w * c])?)?.reshape(&[h, w, c])?;
    Ok((weights.reshape(&[n])?, fused))
}

/// Output of [`classify`].
#[derive(Debug, Clone, Copy)]
pub struct Classification<'t, T: Scalar> {
    /// `(omega, 1 - omega)` as `[2]`; `None` outside fused pooling.
    pub omega: Option<Var<'t, T>>,
    /// Class probabilities `[classes]`.
    pub probs: Var<'t, T>,
}

/// Fuses spatial max and average pooling with a learned convex weight and
/// applies a softmax classifier.
pub fn classify<'t, T: Scalar>(fused: Var<'t, T>, p: &FusionVars<'t, T>, mode: PoolingMode) -> Result<Classification<'t, T>> {
    let shape = fused.shape();
    let &[h, w, c] = shape.as_slice() else {
        return shape_err("classify", format!("expected [H, W, C], got {shape:?}"));
    };
    let flat = fused.reshape(&[h * w, c])?;
    let gmp = flat.max_axis(0)?;
    let gap = flat.mean_axis(0)?;
    let (pooled, omega) = match mode {
        PoolingMode::GmpOnly => (gmp.reshape(&[1, c])?, None),
        PoolingMode::GapOnly => (gap.reshape(&[1, c])?, None),
        PoolingMode::Fused => {
            let both = concat(&[gmp, gap])?.reshape(&[1, 2 * c])?;
            let omega = both.matmul(p.w_omega)?.add_bias(p.b_omega)?.softmax(1)?;
            (omega.matmul(stack(&[gmp, gap])?)?, Some(omega.reshape(&[2])?))
        }
    };
    let probs = pooled.matmul(p.w_cls)?.add_bias(p.b_cls)?.softmax(1)?.reshape(&[p.b_cls.shape()[0]])?;
    Ok(Classification { omega, probs })
}
