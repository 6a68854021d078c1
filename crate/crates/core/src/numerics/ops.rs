//! Differentiable operations on [`Var`].

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::tape::{Backward, Var};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Probability floor applied before the logarithm in [`Var::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// One bilinear tap of a resampling operator: `out[dst] += weight * in[src]`,
/// applied to every channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<T> {
    pub dst: usize,
    pub src: usize,
    pub weight: T,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return shape_err(op, format!("{sa:?} vs {sb:?}"));
    }
    Ok(sa)
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op output shape")
}

fn boxed<T: Scalar>(f: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static) -> Backward<T> {
    Box::new(f)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn op(&self, name: &'static str, value: Tensor<T>, parents: &[usize], backward: Backward<T>) -> Var<'t, T> {
        self.tape.push_op(name, value, parents, backward)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self, &other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.op("add", value, &[self.id, other.id], boxed(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self, &other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.op("sub", value, &[self.id, other.id], boxed(|g, _| vec![Some(g.clone()), Some(g.map(|v: T| -v))])))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.op(
            "mul",
            value,
            &[self.id, other.id],
            boxed(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |u, v| u * v).expect("mul grad")),
                    need[1].then(|| g.zip_map(&a, |u, v| u * v).expect("mul grad")),
                ]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * c);
        self.op("scale", value, &[self.id], boxed(move |g, _| vec![Some(g.map(|v| v * c))]))
    }

    /// Multiplication by a one-element variable (broadcast over `self`).
    pub fn mul_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let sv = s.value();
        if sv.len() != 1 {
            return shape_err("mul_scalar", format!("scalar operand has shape {:?}", sv.shape()));
        }
        let x = self.value();
        let k = sv.item();
        let value = x.map(|v| v * k);
        let s_shape = sv.shape().to_vec();
        Ok(self.op(
            "mul_scalar",
            value,
            &[self.id, s.id],
            boxed(move |g, need| {
                vec![
                    need[0].then(|| g.map(|v| v * k)),
                    need[1].then(|| {
                        let dot = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
                        Tensor::full(&s_shape, dot)
                    }),
                ]
            }),
        ))
    }

    /// Adds `bias` (length `n`) to every row of `self` viewed as `[rows, n]`,
    /// where `n` is the last extent.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let b = bias.value();
        let n = *shape.last().unwrap_or(&1);
        if b.len() != n {
            return shape_err("add_bias", format!("bias {:?} for input {shape:?}", b.shape()));
        }
        let mut data = self.value().into_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let b_shape = b.shape().to_vec();
        Ok(self.op(
            "add_bias",
            tensor(&shape, data),
            &[self.id, bias.id],
            boxed(move |g, need| {
                let gb = need[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    tensor(&b_shape, acc)
                });
                vec![Some(g.clone()), gb]
            }),
        ))
    }

    /// Scales `self` (`[n, ..., c]`) by `gate` (`[n, c]`), broadcasting over
    /// every middle axis.
    pub fn mul_gate(self, gate: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let gv = gate.value();
        let (n, c) = match gv.shape() {
            &[n, c] if shape.first() == Some(&n) && shape.last() == Some(&c) && shape.len() >= 2 => (n, c),
            other => return shape_err("mul_gate", format!("gate {other:?} for input {shape:?}")),
        };
        let x = self.value();
        let mid = x.len() / (n * c);
        let apply = move |src: &[T], gdata: &[T]| -> Vec<T> {
            let mut out = src.to_vec();
            for o in 0..n {
                let gr = &gdata[o * c..][..c];
                for m in 0..mid {
                    for (v, &gg) in out[(o * mid + m) * c..][..c].iter_mut().zip(gr) {
                        *v *= gg;
                    }
                }
            }
            out
        };
        let value = tensor(&shape, apply(x.data(), gv.data()));
        Ok(self.op(
            "mul_gate",
            value,
            &[self.id, gate.id],
            boxed(move |g, need| {
                let gx = need[0].then(|| tensor(x.shape(), apply(g.data(), gv.data())));
                let gg = need[1].then(|| {
                    let mut acc = vec![T::zero(); n * c];
                    for o in 0..n {
                        for m in 0..mid {
                            let base = (o * mid + m) * c;
                            for ch in 0..c {
                                acc[o * c + ch] += g.data()[base + ch] * x.data()[base + ch];
                            }
                        }
                    }
                    tensor(&[n, c], acc)
                });
                vec![gx, gg]
            }),
        ))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape())?;
        let value = tensor(&[m, n], kernels::matmul_raw(a.data(), b.data(), m, k, n));
        Ok(self.op(
            "matmul",
            value,
            &[self.id, other.id],
            boxed(move |g, need| {
                vec![
                    need[0].then(|| tensor(&[m, k], kernels::matmul_nt_raw(g.data(), b.data(), m, n, k))),
                    need[1].then(|| tensor(&[k, n], kernels::matmul_tn_raw(a.data(), g.data(), m, k, n))),
                ]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let value = kernels::transpose(&self.value())?;
        Ok(self.op("transpose", value, &[self.id], boxed(|g, _| vec![Some(kernels::transpose(g).expect("rank 2"))])))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        let orig = self.shape();
        Ok(self.op("reshape", value, &[self.id], boxed(move |g, _| vec![Some(g.reshape(&orig).expect("reshape"))])))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let value = x.map(|v| v.max(T::zero()));
        self.op(
            "relu",
            value,
            &[self.id],
            boxed(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }).expect("relu"))]),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let y = self.value().map(kernels::sigmoid);
        let yc = y.clone();
        self.op(
            "sigmoid",
            y,
            &[self.id],
            boxed(move |g, _| vec![Some(g.zip_map(&yc, |gv, s| gv * s * (T::one() - s)).expect("sigmoid"))]),
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        let y = self.value().map(|v| v.tanh());
        let yc = y.clone();
        self.op(
            "tanh",
            y,
            &[self.id],
            boxed(move |g, _| vec![Some(g.zip_map(&yc, |gv, t| gv * (T::one() - t * t)).expect("tanh"))]),
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, len, inner) = x.split_at_axis(axis)?;
        let y = kernels::softmax(&x, axis)?;
        let yc = y.clone();
        Ok(self.op(
            "softmax",
            y,
            &[self.id],
            boxed(move |g, _| {
                let (yd, gd) = (yc.data(), g.data());
                let mut out = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| yd[at(a)] * gd[at(a)]).sum();
                        for a in 0..len {
                            out[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                vec![Some(tensor(yc.shape(), out))]
            }),
        ))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, len, inner) = x.split_at_axis(axis)?;
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let inv = T::one() / T::from_usize_lossy(len);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(&x.data()[(o * len + a) * inner..][..inner]) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let in_shape = x.shape().to_vec();
        Ok(self.op(
            "mean_axis",
            tensor(&out_shape, out),
            &[self.id],
            boxed(move |g, _| {
                let gd = g.data();
                let grad = Tensor::from_fn(&in_shape, |idx| {
                    let (o, i) = (idx / (len * inner), idx % inner);
                    gd[o * inner + i] * inv
                });
                vec![Some(grad)]
            }),
        ))
    }

    /// Max over `axis`, removing it. The gradient flows to the first maximal
    /// entry.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, len, inner) = x.split_at_axis(axis)?;
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = x.data()[(o * len + a) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = a;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.op(
            "max_axis",
            tensor(&out_shape, out),
            &[self.id],
            boxed(move |g, _| {
                let mut grad = vec![T::zero(); in_shape.iter().product()];
                for o in 0..outer {
                    for i in 0..inner {
                        grad[(o * len + arg[o * inner + i]) * inner + i] = g.data()[o * inner + i];
                    }
                }
                vec![Some(tensor(&in_shape, grad))]
            }),
        ))
    }

    /// Sum of all entries as a rank-0 value.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.op("sum", Tensor::scalar(x.sum()), &[self.id], boxed(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]))
    }

    /// Cross-correlation with a `[kh, kw, Cin, Cout]` kernel.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        let geo = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let value = tensor(&[geo.out_h, geo.out_w, geo.out_c], kernels::conv2d_raw(x.data(), k.data(), &geo));
        Ok(self.op(
            "conv2d",
            value,
            &[self.id, kernel.id],
            boxed(move |g, need| {
                vec![
                    need[0].then(|| tensor(x.shape(), kernels::conv2d_grad_input(g.data(), k.data(), &geo))),
                    need[1].then(|| tensor(k.shape(), kernels::conv2d_grad_kernel(g.data(), x.data(), &geo))),
                ]
            }),
        ))
    }

    /// `out[r, r', :] = self[r, :] + other[r', :]` for two `[n, d]` inputs.
    pub fn pairwise_add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = same_shape("pairwise_add", &self, &other)?;
        let &[n, d] = shape.as_slice() else {
            return shape_err("pairwise_add", format!("expected [n, d], got {shape:?}"));
        };
        let (a, b) = (self.value(), other.value());
        let mut out = Vec::with_capacity(n * n * d);
        for r in 0..n {
            for rp in 0..n {
                out.extend(a.data()[r * d..][..d].iter().zip(&b.data()[rp * d..][..d]).map(|(&x, &y)| x + y));
            }
        }
        Ok(self.op(
            "pairwise_add",
            tensor(&[n, n, d], out),
            &[self.id, other.id],
            boxed(move |g, _| {
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); n * d];
                for r in 0..n {
                    for rp in 0..n {
                        let row = &g.data()[(r * n + rp) * d..][..d];
                        for k in 0..d {
                            ga[r * d + k] += row[k];
                            gb[rp * d + k] += row[k];
                        }
                    }
                }
                vec![Some(tensor(&[n, d], ga)), Some(tensor(&[n, d], gb))]
            }),
        ))
    }

    /// Linear resampling of a `[positions, C]` view of `self` into
    /// `out_shape` (whose last extent must be `C`).
    pub fn resample(self, taps: Arc<Vec<Tap<T>>>, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        if out_shape.last() != Some(&c) {
            return shape_err("resample", format!("output {out_shape:?} must end in {c} channels"));
        }
        let (n_in, n_out) = (x.len() / c, out_shape.iter().product::<usize>() / c);
        if taps.iter().any(|t| t.src >= n_in || t.dst >= n_out) {
            return shape_err("resample", "tap index out of range");
        }
        let mut out = vec![T::zero(); n_out * c];
        for t in taps.iter() {
            for (o, &v) in out[t.dst * c..][..c].iter_mut().zip(&x.data()[t.src * c..][..c]) {
                *o += t.weight * v;
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.op(
            "resample",
            tensor(out_shape, out),
            &[self.id],
            boxed(move |g, _| {
                let mut grad = vec![T::zero(); n_in * c];
                for t in taps.iter() {
                    for (o, &v) in grad[t.src * c..][..c].iter_mut().zip(&g.data()[t.dst * c..][..c]) {
                        *o += t.weight * v;
                    }
                }
                vec![Some(tensor(&in_shape, grad))]
            }),
        ))
    }

    /// `-ln(max(p[y], 1e-12))` for a probability vector of any shape.
    pub fn cross_entropy(self, y: usize) -> Result<Var<'t, T>> {
        let p = self.value();
        if y >= p.len() {
            return Err(crate::error::Error::InvalidClass { index: y, classes: p.len() });
        }
        let floor = T::lit(PROB_FLOOR);
        let py = p.data()[y];
        let value = Tensor::scalar(-py.max(floor).ln());
        let shape = p.shape().to_vec();
        Ok(self.op(
            "cross_entropy",
            value,
            &[self.id],
            boxed(move |g: &Tensor<T>, _: &[bool]| {
                let mut grad = Tensor::<T>::zeros(&shape);
                if py > floor {
                    grad.data_mut()[y] = -g.item() / py;
                }
                vec![Some(grad)]
            }),
        ))
    }
}

/// Stacks equally shaped values along a new leading axis.
pub fn stack<'t, T: Scalar>(vars: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let Some(first) = vars.first() else {
        return shape_err("stack", "nothing to stack");
    };
    let shape = first.shape();
    let mut data = Vec::with_capacity(shape.iter().product::<usize>() * vars.len());
    for v in vars {
        let t = v.value();
        if t.shape() != shape.as_slice() {
            return shape_err("stack", format!("{:?} vs {shape:?}", t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![vars.len()];
    out_shape.extend_from_slice(&shape);
    let item = first.value().len();
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    Ok(first.op(
        "stack",
        tensor(&out_shape, data),
        &ids,
        boxed(move |g, need| {
            need.iter()
                .enumerate()
                .map(|(i, &n)| n.then(|| tensor(&shape, g.data()[i * item..][..item].to_vec())))
                .collect()
        }),
    ))
}

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat<'t, T: Scalar>(vars: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let Some(first) = vars.first() else {
        return shape_err("concat", "nothing to concatenate");
    };
    let tail = first.shape()[1..].to_vec();
    let mut lens = Vec::with_capacity(vars.len());
    let mut data = Vec::new();
    let mut lead = 0;
    for v in vars {
        let t = v.value();
        if t.rank() == 0 || t.shape()[1..] != tail[..] {
            return shape_err("concat", format!("{:?} vs [_, {tail:?}]", t.shape()));
        }
        lead += t.shape()[0];
        lens.push(t.shape().to_vec());
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![lead];
    out_shape.extend_from_slice(&tail);
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    Ok(first.op(
        "concat",
        tensor(&out_shape, data),
        &ids,
        boxed(move |g, need| {
            let mut offset = 0;
            lens.iter()
                .zip(need)
                .map(|(shape, &n)| {
                    let len: usize = shape.iter().product();
                    let part = n.then(|| tensor(shape, g.data()[offset..][..len].to_vec()));
                    offset += len;
                    part
                })
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn cross_entropy_of_certain_prediction_is_zero() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        assert_eq!(p.cross_entropy(1).unwrap().value().item(), 0.0);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let tape = Tape::<f64>::new();
        let p = tape.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let loss = p.cross_entropy(0).unwrap();
        assert!((loss.value().item() - 1e-12f64.ln().abs()).abs() < 1e-9);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[2], 0.5));
        assert!(p.cross_entropy(2).is_err());
    }

    #[test]
    fn max_axis_routes_gradient_to_first_max() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3, 1], vec![2.0, 2.0, 1.0]).unwrap());
        let m = x.max_axis(0).unwrap();
        assert_eq!(m.value().data(), &[2.0]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn stack_and_concat_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(stack(&[a, b]).unwrap().shape(), vec![2, 2, 3]);
        assert_eq!(concat(&[a, b]).unwrap().shape(), vec![4, 3]);
        let c = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(stack(&[a, c]).is_err());
        assert!(concat(&[a, c]).is_err());
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1]));
        assert_eq!(z.sigmoid().value().item(), 0.5);
        assert_eq!(z.tanh().value().item(), 0.0);
    }
}
