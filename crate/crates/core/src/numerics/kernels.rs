//! Forward kernels on plain tensors. The tape ops in `ops` wrap these and
//! add their vector-Jacobian products.

use crate::error::{shape_err, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Geometry of a 2-D convolution over an `[H, W, C]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let ([in_h, in_w, in_c], [k_h, k_w, k_c, out_c]) = (
            <[usize; 3]>::try_from(input).or_else(|_| shape_err("conv2d", format!("input must be [H,W,C], got {input:?}")))?,
            <[usize; 4]>::try_from(kernel)
                .or_else(|_| shape_err("conv2d", format!("kernel must be [kh,kw,Cin,Cout], got {kernel:?}")))?,
        );
        if k_c != in_c {
            return shape_err("conv2d", format!("kernel expects {k_c} input channels, input has {in_c}"));
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        if k_h > in_h + 2 * padding || k_w > in_w + 2 * padding {
            return shape_err("conv2d", format!("kernel {k_h}x{k_w} larger than padded input {in_h}x{in_w} (+{padding})"));
        }
        let out_h = (in_h + 2 * padding - k_h) / stride + 1;
        let out_w = (in_w + 2 * padding - k_w) / stride + 1;
        Ok(Self { in_h, in_w, in_c, k_h, k_w, out_c, stride, padding, out_h, out_w })
    }

    /// Input pixel feeding output `(oy, ox)` through tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.in_h && ix < self.in_w).then_some(iy * self.in_w + ix)
    }
}

/// `[m, k] x [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Ok(Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n)).expect("matmul shape"))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        _ => shape_err("matmul", format!("{a:?} x {b:?}")),
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]`.
pub(crate) fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]`.
pub(crate) fn matmul_nt_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let &[m, n] = a.shape() else {
        return shape_err("transpose", format!("expected rank 2, got {:?}", a.shape()));
    };
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| d[(idx % m) * n + idx / m]))
}

/// Cross-correlation of an `[H, W, Cin]` map with a `[kh, kw, Cin, Cout]`
/// kernel. Output extent is `floor((H + 2p - k) / stride) + 1`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let data = conv2d_raw(input.data(), kernel.data(), &g);
    Ok(Tensor::new(&[g.out_h, g.out_w, g.out_c], data).expect("conv shape"))
}

pub(crate) fn conv2d_raw<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut out = vec![T::zero(); g.out_h * g.out_w * cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let orow = &mut out[(oy * g.out_w + ox) * cout..][..cout];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let px = &input[src * cin..][..cin];
                    let taps = &kernel[(ky * g.k_w + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        for (o, &w) in orow.iter_mut().zip(&taps[ci * cout..][..cout]) {
                            *o += v * w;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(grad_out: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut grad_in = vec![T::zero(); g.in_h * g.in_w * cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let grow = &grad_out[(oy * g.out_w + ox) * cout..][..cout];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let taps = &kernel[(ky * g.k_w + kx) * cin * cout..][..cin * cout];
                    for (ci, gi) in grad_in[src * cin..][..cin].iter_mut().enumerate() {
                        let w = &taps[ci * cout..][..cout];
                        *gi += grow.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
    }
    grad_in
}

pub(crate) fn conv2d_grad_kernel<T: Scalar>(grad_out: &[T], input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut grad_k = vec![T::zero(); g.k_h * g.k_w * cin * cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let grow = &grad_out[(oy * g.out_w + ox) * cout..][..cout];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let px = &input[src * cin..][..cin];
                    let taps = &mut grad_k[(ky * g.k_w + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        for (o, &gv) in taps[ci * cout..][..cout].iter_mut().zip(grow) {
                            *o += v * gv;
                        }
                    }
                }
            }
        }
    }
    grad_k
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = x.split_at_axis(axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for a in 0..len {
                let e = (src[at(a)] - max).exp();
                out[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[at(a)] /= total;
            }
        }
    }
    Ok(Tensor::new(x.shape(), out).expect("softmax shape"))
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64).sin());
        let b = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64 * 0.3).cos());
        let tn = matmul_tn_raw(a.data(), b.data(), 3, 4, 5);
        let explicit = matmul(&transpose(&a).unwrap(), &b).unwrap();
        assert_eq!(tn, explicit.data());
        let c = Tensor::<f64>::from_fn(&[5, 4], |i| i as f64 * 0.1);
        let nt = matmul_nt_raw(a.data(), c.data(), 3, 4, 5);
        let explicit = matmul(&a, &transpose(&c).unwrap()).unwrap();
        for (x, y) in nt.iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let s = softmax(&Tensor::<f64>::zeros(&[1, 4]), 1).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&Tensor::<f64>::new(&[2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(s.all_finite());
    }

    #[test]
    fn conv_ones_kernel_on_constant_image() {
        let img = Tensor::<f64>::full(&[5, 5, 1], 1.0);
        let k = Tensor::<f64>::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&img, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[3, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let img = Tensor::<f64>::from_fn(&[3, 4, 2], |i| i as f64);
        let mut k = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        assert_eq!(conv2d(&img, &k, 1, 0).unwrap(), img);
    }

    #[test]
    fn conv_output_extent_formula() {
        let img = Tensor::<f64>::zeros(&[224, 224, 3]);
        let k = Tensor::<f64>::zeros(&[3, 3, 3, 4]);
        assert_eq!(conv2d(&img, &k, 2, 1).unwrap().shape(), &[112, 112, 4]);
        let k5 = Tensor::<f64>::zeros(&[5, 5, 3, 1]);
        assert_eq!(conv2d(&Tensor::zeros(&[7, 9, 3]), &k5, 2, 0).unwrap().shape(), &[2, 3, 1]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let img = Tensor::<f64>::zeros(&[2, 2, 1]);
        assert!(conv2d(&img, &Tensor::zeros(&[3, 3, 1, 1]), 1, 0).is_err());
        assert!(conv2d(&img, &Tensor::zeros(&[1, 1, 2, 1]), 1, 0).is_err());
        assert!(conv2d(&img, &Tensor::zeros(&[1, 1, 1, 1]), 0, 0).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}
