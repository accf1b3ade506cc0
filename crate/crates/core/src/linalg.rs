//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("matrix has a negative eigenvalue {0:e}")]
    NotPsd(f64),
    #[error("non-finite matrix entry")]
    NonFinite,
}

/// Eigenvalues in descending order and the matching unit eigenvectors as
/// columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi. Stops once the off-diagonal Frobenius norm falls below
/// `tol` times the norm of the whole matrix.
pub fn sym_eigen(a: &Array2<f64>, tol: f64) -> Result<SymEigen, LinalgError> {
    let (n, m) = a.dim();
    if n != m {
        return Err(LinalgError::NotSquare { rows: n, cols: m });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            let diff = (a[[i, j]] - a[[j, i]]).abs();
            if diff > 1e-10 * scale.max(1.0) {
                return Err(LinalgError::NotSymmetric { row: i, col: j, diff });
            }
        }
    }
    // row-major working copies
    let mut s: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |s: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += s[i * n + j] * s[i * n + j];
                }
            }
        }
        acc.sqrt()
    };
    for _ in 0..MAX_SWEEPS {
        if off(&s) <= tol * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = s[p * n + p];
                let aqq = s[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = s[p * n + k];
                    let akq = s[q * n + k];
                    let np = c * akp - sn * akq;
                    let nq = sn * akp + c * akq;
                    s[p * n + k] = np;
                    s[k * n + p] = np;
                    s[q * n + k] = nq;
                    s[k * n + q] = nq;
                }
                s[p * n + p] = app - t * apq;
                s[q * n + q] = aqq + t * apq;
                s[p * n + q] = 0.0;
                s[q * n + p] = 0.0;
                // eigenvectors are columns of v; keep v transposed-by-row for
                // contiguous updates: row r of vt is column r of v
                for k in 0..n {
                    let vp = v[p * n + k];
                    let vq = v[q * n + k];
                    v[p * n + k] = c * vp - sn * vq;
                    v[q * n + k] = sn * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j * n + j].total_cmp(&s[i * n + i]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| s[i * n + i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, col]] = v[i * n + k];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let e = sym_eigen(a, JACOBI_TOL)?;
    let scale = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if let Some(&neg) = e.values.iter().find(|&&l| l < -1e-10 * scale) {
        return Err(LinalgError::NotPsd(neg));
    }
    let roots = e.values.mapv(|l| l.max(0.0).sqrt());
    let scaled = &e.vectors * &roots.insert_axis(ndarray::Axis(0));
    let out = scaled.dot(&e.vectors.t());
    // symmetrize away rounding
    Ok((&out + &out.t()) * 0.5)
}
