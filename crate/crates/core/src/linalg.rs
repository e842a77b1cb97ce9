//! Dense matrix helpers shared by every module.
//!
//! All matrices are `nalgebra::DMatrix<f64>`. Constructors that take
//! user-facing data reject non-finite entries.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Build a matrix from row-major entries, rejecting NaN/Inf.
pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if data.len() != rows * cols {
        return Err(Error::shape("matrix construction", rows * cols, data.len()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix construction"));
    }
    Ok(Matrix::from_row_slice(rows, cols, data))
}

/// Build a matrix from a list of equally long rows.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::shape("matrix rows", cols, bad.len()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    from_row_slice(rows.len(), cols, &flat)
}

pub fn ensure_finite(m: &Matrix, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn ensure_square(m: &Matrix, context: &'static str) -> Result<()> {
    if m.nrows() == m.ncols() {
        Ok(())
    } else {
        Err(Error::shape(
            context,
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ))
    }
}

/// Largest absolute asymmetry `|A_ij - A_ji|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn mean_diagonal(m: &Matrix) -> f64 {
    let n = m.nrows().min(m.ncols());
    if n == 0 {
        return 0.0;
    }
    m.diagonal().sum() / n as f64
}

/// Cholesky factorization with a single fallback: on failure, add
/// `1e-10 * mean(diag)` to the diagonal and retry once.
pub fn cholesky_with_jitter(a: &Matrix, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let jitter = 1e-10 * mean_diagonal(a).abs().max(f64::MIN_POSITIVE);
    let mut shifted = a.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).ok_or(Error::Factorization { context, jitter })
}

/// Cholesky factorization over an absolute jitter ladder `1e-8, 1e-7, ..., 1e-4`.
/// Returns the factor and the jitter that was needed (0 when none).
pub fn cholesky_ladder(a: &Matrix, context: &'static str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    for jitter in [1e-8, 1e-7, 1e-6, 1e-5, 1e-4] {
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            log::debug!("{context}: cholesky needed jitter {jitter:e}");
            return Ok((c, jitter));
        }
    }
    Err(Error::Factorization {
        context,
        jitter: 1e-4,
    })
}

/// Solve `A X = B` for symmetric positive definite `A` via Cholesky
/// (with the one-shot jitter fallback).
pub fn spd_solve(a: &Matrix, b: &Matrix, context: &'static str) -> Result<Matrix> {
    let chol = cholesky_with_jitter(a, context)?;
    Ok(chol.solve(b))
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(a: &Matrix) -> (Vector, Matrix) {
    let eig = SymmetricEigen::new(a.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(a.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Matrix) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// `(1/n) * sum of squared entries`, square-rooted.
pub fn rms(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    (m.norm_squared() / m.len() as f64).sqrt()
}

/// Row-major serde representation of a matrix.
pub mod serde_matrix {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct RowMajor {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
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

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rm = RowMajor::deserialize(d)?;
        if rm.data.len() != rm.rows * rm.cols {
            return Err(serde::de::Error::custom("matrix data length does not match shape"));
        }
        Ok(Matrix::from_row_slice(rm.rows, rm.cols, &rm.data))
    }

    pub mod option {
        use super::{Matrix, RowMajor};
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
            #[derive(Serialize)]
            struct Wrap<'a>(#[serde(with = "super")] &'a Matrix);
            m.as_ref().map(Wrap).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
            let rm: Option<RowMajor> = Option::deserialize(d)?;
            rm.map(|rm| {
                if rm.data.len() != rm.rows * rm.cols {
                    Err(serde::de::Error::custom("matrix data length does not match shape"))
                } else {
                    Ok(Matrix::from_row_slice(rm.rows, rm.cols, &rm.data))
                }
            })
            .transpose()
        }
    }
}
