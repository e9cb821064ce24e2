//! Finite-difference gradient oracle.
//!
//! Every analytic backward pass in this repository is validated against
//! [`finite_difference_gradient`]. The oracle runs in double precision only;
//! callers lift `f32` computations to `f64` before checking.

use crate::error::{numeric, parameter, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function:
/// `g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// `f` must be pure. Fails if any evaluation is non-finite.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return parameter(format!("step size must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return numeric(format!(
                "function returned a non-finite value while probing element {i}"
            ));
        }
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst relative disagreement between two gradients.
///
/// Per element: `|a - b| / max(|a|, |b|, floor)`, with `floor` guarding the
/// comparison where both sides are essentially zero.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return parameter(format!(
            "gradient shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let denom = x.abs().max(y.abs()).max(floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Reduction;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[5], vec![0.3, -1.2, 4.0, 0.0, 2.5]).unwrap();
        let grad =
            finite_difference_gradient(|t| t.reduce(Reduction::Sum), &x, 1e-5).unwrap();
        for &g in grad.data() {
            assert!((g - 1.0).abs() < 1e-10, "gradient of sum should be 1, got {g}");
        }
    }

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let grad = finite_difference_gradient(
            |t| t.map(|v| v * v).reduce(Reduction::Sum),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((grad.data()[0] - 2.0).abs() < 1e-6);
        assert!((grad.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        // Probing x=0 with eps=0.5 evaluates ln(-0.5) = NaN.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = finite_difference_gradient(|t| Ok(t.data()[0].ln()), &x, 0.5);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(finite_difference_gradient(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }
}
