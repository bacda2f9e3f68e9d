//! Small dense linear-algebra helpers shared by the embedding modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Ridge magnitude `1e-8 * trace / dim` used to regularize scatter matrices.
pub fn trace_ridge(m: &DMatrix<f64>) -> f64 {
    let dim = m.nrows().max(1) as f64;
    let eps = 1e-8 * m.trace().abs() / dim;
    if eps > 0.0 {
        eps
    } else {
        1e-12
    }
}

/// Solves `A v = lambda B v` for symmetric `A` and symmetric positive
/// definite `B`. Eigenvalues are returned in ascending order; eigenvectors
/// are the matching columns, normalized so that `v' B v = 1`.
pub fn generalized_symmetric_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::invalid(
            "generalized eigenproblem needs square matrices of equal size",
        ));
    }
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("right-hand matrix is not positive definite"))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    let mut c = &l_inv * a * l_inv.transpose();
    // symmetrize away rounding asymmetry before the symmetric solver
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(c, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("symmetric eigen solver did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .total_cmp(&eig.eigenvalues[j])
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite generalized eigenvalue"));
    }
    let back = l_inv.transpose();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v: DVector<f64> = &back * eig.eigenvectors.column(i);
        // deterministic sign: largest-magnitude entry positive
        let pivot = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(col, &v);
    }
    Ok((values, vectors))
}

/// Thin QR orthonormalization with column signs fixed so that `R` has a
/// non-negative diagonal.
pub fn orthonormalize_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        let rjj = r[(j, j)];
        if rjj.abs() < 1e-300 || !rjj.is_finite() {
            return Err(Error::numerical(
                "rank-deficient matrix in orthonormalization",
            ));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Symmetric inverse square root of the (population) covariance of the
/// rows of `x`, with a `1e-8 * trace / dim` ridge. Right-multiplying
/// centered data by it gives identity covariance.
pub fn whitening_matrix(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("whitening needs at least two samples"));
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = centered.transpose() * &centered / n as f64;
    let eps = trace_ridge(&cov);
    for i in 0..cov.nrows() {
        cov[(i, i)] += eps;
    }
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("covariance eigen solver did not converge"))?;
    if eig.eigenvalues.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::numerical("covariance is not positive definite"));
    }
    let inv_sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| 1.0 / v.sqrt()),
    );
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose())
}

/// Frobenius inner product.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generalized_eigen_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![6.0, 1.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let (vals, vecs) = generalized_symmetric_eigen(&a, &b).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        let v = vecs.column(1);
        let bnorm = (v.transpose() * &b * v)[(0, 0)];
        assert!((bnorm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 2.0, 2.5, 3.0, 5.0, 4.0, 4.0, 6.0, 7.5]);
        let w = whitening_matrix(&x).unwrap();
        let mean = x.row_mean();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= &mean;
        }
        let z = c * w;
        let cov = z.transpose() * &z / 5.0;
        assert!((cov - DMatrix::identity(2, 2)).norm() < 1e-6);
    }

    #[test]
    fn orthonormal_columns() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, 0.0]);
        let q = orthonormalize_columns(&m).unwrap();
        let g = q.transpose() * &q;
        assert!((g - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}

/// Serde adapter storing a matrix as `{rows, cols, data}` with `data` in
/// row-major order.
pub mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct RowMajor {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        RowMajor {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rm = RowMajor::deserialize(d)?;
        if rm.rows * rm.cols != rm.data.len() {
            return Err(serde::de::Error::custom(format!(
                "matrix {}x{} has {} entries",
                rm.rows,
                rm.cols,
                rm.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(rm.rows, rm.cols, &rm.data))
    }
}
