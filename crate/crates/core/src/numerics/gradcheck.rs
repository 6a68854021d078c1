//! Central finite-difference verification of tape gradients (64-bit).

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with the denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `f` against `(f(p + eps) - f(p - eps)) / 2 eps`
/// for every element of every parameter.
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_gradients_on(f, params, epsilon, |_, _| true)
}

/// Like [`check_gradients`], restricted to the elements selected by
/// `select(param_index, element_index)`.
pub fn check_gradients_on<F, S>(f: F, params: &[Tensor<f64>], epsilon: f64, select: S) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    S: Fn(usize, usize) -> bool,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v).clone()).collect()
    };

    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&tape, &vars)?.value();
        if loss.len() != 1 || !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("loss {loss:?} during finite differences")));
        }
        Ok(loss.item())
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            if !select(pi, ei) {
                continue;
            }
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::<f64>::from_fn(&[4], |i| i as f64 - 1.5);
        let r = check_gradients(|_, v| Ok(v[0].mul(v[0])?.sum()), &[p], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::<f64>::full(&[3], 2.0);
        let r = check_gradients(
            |tape, v| {
                let c = tape.constant(Tensor::scalar(7.0));
                let zero = v[0].scale(0.0).sum();
                c.add(zero)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = Tensor::<f64>::full(&[1], 0.0);
        let r = check_gradients(
            |tape, v| {
                let inf = tape.constant(Tensor::scalar(f64::INFINITY));
                inf.add(v[0].sum())
            },
            &[p],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
