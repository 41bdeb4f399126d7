use super::Tensor;
use crate::error::{Error, Result};

/// Central finite differences of a scalar function over every coordinate of
/// `params`: `(f(θ + eps·e_j) − f(θ − eps·e_j)) / (2·eps)`.
///
/// Used as the test oracle for the analytic gradients.
pub fn finite_difference_grad<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for j in 0..params[p].len() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + eps;
            let plus = f(&work)?;
            work[p].data_mut()[j] = orig - eps;
            let minus = f(&work)?;
            work[p].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "function is non-finite near parameter {p}, coordinate {j}"
                )));
            }
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}
