use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::linalg::sym_eigen;
use crate::tensor::Tensor;

/// Top principal directions of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal columns, shape `dim × k`, by decreasing variance.
    pub basis: Tensor,
    /// Leading eigenvalues of the population covariance, decreasing.
    pub values: Vec<f64>,
    /// Share of the total variance captured by the `k` directions.
    pub explained: f64,
    /// Centered data in basis coordinates, shape `N × k`.
    pub projected: Tensor,
}

impl Pca {
    pub fn project(&self, data: &Tensor) -> Tensor {
        let centered = Tensor::from_fn(data.rows(), data.cols(), |r, c| data[(r, c)] - self.mean[c]);
        centered.matmul(&self.basis)
    }

    pub fn reconstruct(&self, coords: &Tensor) -> Tensor {
        let mut out = coords.matmul(&self.basis.transpose());
        for r in 0..out.rows() {
            for (v, mu) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *v += mu;
            }
        }
        out
    }
}

/// Projects onto the top `k` eigenvectors of the empirical covariance.
pub fn pca_project(data: &Tensor, k: usize) -> Result<Pca> {
    let (n, dim) = data.shape();
    if k == 0 || k > n.min(dim) {
        return Err(CoreError::invalid("k must lie in 1..=min(rows, cols)"));
    }
    let eig = sym_eigen(&data.covariance())?;
    let order: Vec<usize> = (0..dim).rev().collect();
    let basis = Tensor::from_fn(dim, k, |r, c| eig.vectors[(r, order[c])]);
    let values: Vec<f64> = order[..k].iter().map(|&i| eig.values[i].max(0.0)).collect();
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let explained = if total > 0.0 { values.iter().sum::<f64>() / total } else { 1.0 };
    let mut pca = Pca { mean: data.col_means(), basis, values, explained, projected: Tensor::zeros(0, k) };
    pca.projected = pca.project(data);
    Ok(pca)
}
