//! Thin SVD with descending singular values, used by the low-rank merge
//! transforms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SVD_EPS: f64 = 1e-12;
const SVD_MAX_ITER: usize = 10_000;

pub struct ThinSvd {
    /// m x k, k = min(m, n).
    pub u: DMatrix<f64>,
    /// Length k, sorted descending.
    pub sigma: DVector<f64>,
    /// k x n.
    pub v_t: DMatrix<f64>,
}

/// Thin SVD of `m`, singular values sorted descending with columns/rows of
/// the factors permuted consistently.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    let svd = m
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".to_string()))?;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sigma = svd.singular_values;

    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).expect("finite singular values"));

    let mut u_sorted = DMatrix::zeros(u.nrows(), k);
    let mut v_t_sorted = DMatrix::zeros(k, v_t.ncols());
    let mut sigma_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_t_sorted.set_row(dst, &v_t.row(src));
        sigma_sorted[dst] = sigma[src];
    }
    Ok(ThinSvd {
        u: u_sorted,
        sigma: sigma_sorted,
        v_t: v_t_sorted,
    })
}

/// The closest matrix with orthonormal columns (the polar factor), computed
/// from the SVD of `m`. Requires ncols <= nrows.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(m)?;
    Ok(&svd.u * &svd.v_t)
}
