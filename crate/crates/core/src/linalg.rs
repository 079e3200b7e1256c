//! Small dense factorizations: Cholesky, SPD log-determinants and inverses,
//! and a Jacobi eigensolver for symmetric matrices.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::tensor::Tensor;

/// Default absolute symmetry tolerance, scaled by `max(1, max|H|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |H[{row},{col}] - H[{col},{row}]| = {deviation:e}")]
    Asymmetric { row: usize, col: usize, deviation: f64 },
    #[error("Cholesky factorization failed at pivot {pivot} (value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("singular matrix")]
    Singular,
}

fn square_dim(h: &Tensor) -> Result<usize, LinalgError> {
    let (r, c) = h.shape();
    if r != c {
        return Err(LinalgError::NotSquare { rows: r, cols: c });
    }
    Ok(r)
}

pub fn check_symmetric(h: &Tensor, tol: f64) -> Result<(), LinalgError> {
    let n = square_dim(h)?;
    let scale = h.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let dev = (h[(i, j)] - h[(j, i)]).abs();
            if dev > tol * scale || dev.is_nan() {
                return Err(LinalgError::Asymmetric { row: i, col: j, deviation: dev });
            }
        }
    }
    Ok(())
}

/// Lower-triangular `L` with `H = L Lᵀ`. Only the lower triangle of `h` is read.
pub fn cholesky(h: &Tensor) -> Result<Tensor, LinalgError> {
    let n = square_dim(h)?;
    let mut l = Tensor::zeros(n, n);
    cholesky_into(h.data(), n, l.data_mut())?;
    Ok(l)
}

/// Slice version used by the batched graph primitive.
pub(crate) fn cholesky_into(h: &[f64], n: usize, l: &mut [f64]) -> Result<(), LinalgError> {
    for j in 0..n {
        let mut d = h[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = math::sqrt(d);
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = h[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
        for i in 0..j {
            l[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// `log det H = 2 Σ log L_ii`.
pub(crate) fn logdet_from_factor(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| 2.0 * math::log(l[i * n + i])).sum()
}

/// Inverse from a Cholesky factor, written into `out` (full symmetric matrix).
pub(crate) fn inverse_from_factor(l: &[f64], n: usize, out: &mut [f64]) {
    // Solve L Lᵀ X = I column by column.
    let mut col = alloc::vec![0.0; n];
    for c in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[c] = 1.0;
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[i * n + k] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        for r in 0..n {
            out[r * n + c] = col[r];
        }
    }
    // Symmetrize away rounding.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
}

/// Log-determinant of a symmetric positive definite matrix.
pub fn spd_logdet(h: &Tensor) -> Result<f64, LinalgError> {
    check_symmetric(h, SYMMETRY_TOL)?;
    let l = cholesky(h)?;
    Ok(logdet_from_factor(l.data(), h.rows()))
}

pub fn spd_inverse(h: &Tensor) -> Result<Tensor, LinalgError> {
    let n = square_dim(h)?;
    let l = cholesky(h)?;
    let mut out = Tensor::zeros(n, n);
    inverse_from_factor(l.data(), n, out.data_mut());
    Ok(out)
}

/// Solves `H x = b` for SPD `H`.
pub fn spd_solve(h: &Tensor, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = square_dim(h)?;
    let l = cholesky(h)?;
    let l = l.data();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: Tensor,
}

pub fn sym_eigen(h: &Tensor) -> Result<SymEigen, LinalgError> {
    let n = square_dim(h)?;
    let mut a = h.clone();
    let mut v = Tensor::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let scale: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = math::sign(theta).max(0.0) * 2.0 - 1.0;
                let t = t / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Tensor::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

/// Eigenvalue route to the log-determinant; cross-check for [`spd_logdet`].
pub fn logdet_via_eigen(h: &Tensor) -> Result<f64, LinalgError> {
    let e = sym_eigen(h)?;
    let mut acc = 0.0;
    for (i, &l) in e.values.iter().enumerate() {
        if !(l > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { pivot: i, value: l });
        }
        acc += math::log(l);
    }
    Ok(acc)
}

/// Symmetric PSD square root `C` with `C C = H`.
pub fn psd_sqrt(h: &Tensor) -> Result<Tensor, LinalgError> {
    let e = sym_eigen(h)?;
    let n = h.rows();
    let roots: Vec<f64> = e.values.iter().map(|&l| math::sqrt(l.max(0.0))).collect();
    Ok(Tensor::from_fn(n, n, |i, j| {
        (0..n).map(|k| e.vectors[(i, k)] * roots[k] * e.vectors[(j, k)]).sum()
    }))
}

/// Dense inverse by Gauss-Jordan with partial pivoting.
pub fn inverse(h: &Tensor) -> Result<Tensor, LinalgError> {
    let n = square_dim(h)?;
    let mut a = h.clone();
    let mut inv = Tensor::identity(n);
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap_or(c);
        if a[(piv, c)].abs() < 1e-300 {
            return Err(LinalgError::Singular);
        }
        if piv != c {
            for k in 0..n {
                let t = a[(c, k)];
                a[(c, k)] = a[(piv, k)];
                a[(piv, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(piv, k)];
                inv[(piv, k)] = t;
            }
        }
        let d = a[(c, c)];
        for k in 0..n {
            a[(c, k)] /= d;
            inv[(c, k)] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[(r, c)];
                if f != 0.0 {
                    for k in 0..n {
                        a[(r, k)] -= f * a[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
    }
    Ok(inv)
}
