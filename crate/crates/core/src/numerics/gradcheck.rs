//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor2D;

/// Compares `analytic` against central differences of `f` around `params`,
/// one coordinate at a time, and returns the worst relative error.
///
/// The relative error divides by `max(1, |analytic|)` so near-zero
/// gradients are compared absolutely.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[Tensor2D]) -> Result<f64>,
    params: &[Tensor2D],
    analytic: &[Tensor2D],
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }

    let mut probe: Vec<Tensor2D> = params.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..params.len() {
        if params[t].shape() != analytic[t].shape() {
            return Err(Error::Dimension(format!(
                "parameter {t}: value {:?} vs gradient {:?}",
                params[t].shape(),
                analytic[t].shape()
            )));
        }
        for i in 0..params[t].len() {
            let orig = probe[t].data()[i];

            probe[t].data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe[t].data_mut()[i] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Divergence {
                    step: i,
                    detail: format!("non-finite probe value for parameter tensor {t}"),
                });
            }
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let rel = (fd - a).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_rounding() {
        // f(p) = ||p||^2 at p = [1, 2]; gradient [2, 4].
        let params = vec![Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap()];
        let analytic = vec![Tensor2D::from_rows(&[vec![2.0, 4.0]]).unwrap()];
        let mut f = |p: &[Tensor2D]| Ok(p[0].data().iter().map(|v| v * v).sum());
        let err = finite_diff_check(&mut f, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let params = vec![Tensor2D::from_rows(&[vec![0.4, -0.7]]).unwrap()];
        let analytic = vec![Tensor2D::zeros(1, 2)];
        let mut f = |_: &[Tensor2D]| Ok(3.25);
        let err = finite_diff_check(&mut f, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let params = vec![Tensor2D::zeros(1, 1)];
        let analytic = vec![Tensor2D::zeros(1, 1)];
        let mut f = |_: &[Tensor2D]| Ok(0.0);
        assert!(matches!(
            finite_diff_check(&mut f, &params, &analytic, 1e-2),
            Err(Error::Config(_))
        ));
    }
}
