use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITERS: usize = 10_000;

pub fn to_matrix(t: &Tensor<f64>) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 {
        return Err(shape_err("nuclear_norm", format!("expected a matrix, got {:?}", t.shape())));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

/// Singular values of a matrix, largest first. `name` labels convergence errors.
pub fn singular_values(name: &str, t: &Tensor<f64>) -> Result<Vec<f64>> {
    let m = to_matrix(t)?;
    if !t.is_finite() {
        return Err(Error::Svd(format!("{name} (non-finite entries)")));
    }
    let svd = m
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Svd(name.to_string()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Sum of singular values.
pub fn nuclear_norm(name: &str, t: &Tensor<f64>) -> Result<f64> {
    Ok(singular_values(name, t)?.iter().sum())
}
