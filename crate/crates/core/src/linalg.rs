//! Dense helpers: row-major matrices, Cholesky with jitter, Gaussian draws
//! from a precision parametrization.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RowMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix storage", rows * cols, data.len()));
        }
        Ok(RowMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("row {i} length"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(RowMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Column subset, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> RowMatrix {
        let mut out = RowMatrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (c, &j) in cols.iter().enumerate() {
                out.data[i * cols.len() + c] = src[j];
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factor of a symmetric positive-definite matrix. On failure a
/// diagonal jitter starting at `1e-10` (relative to the mean diagonal) is
/// added and grown tenfold until the factorization succeeds.
pub fn cholesky_jittered(a: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let n = a.nrows();
    let scale = (a.trace() / n.max(1) as f64).abs().max(1.0);
    let mut jitter = 1e-10;
    while jitter < 1e6 {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(b) {
            warn!("{context}: added ridge jitter {:.1e} to factorize", jitter * scale);
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NonFinite(format!("{context}: matrix is not positive definite")))
}

pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Mean `Q⁻¹b` of the Gaussian with precision `Q` and linear term `b`.
pub fn precision_mean(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    chol.solve(b)
}

/// Draw from `N(Q⁻¹b, Q⁻¹)` given the Cholesky factor `L Lᵀ = Q`.
pub fn sample_precision_form<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    b: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(b);
    let z = standard_normals(b.len(), rng);
    let l = chol.l();
    let noise = l
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has positive diagonal");
    mean + noise
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_matrix_access() {
        let m = RowMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(m.select_columns(&[2, 0]).row(0), &[3.0, 1.0]);
        assert_eq!(m.to_dmatrix()[(1, 2)], 6.0);
        assert!(RowMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_jittered(a, "test").is_ok());
    }

    #[test]
    fn precision_draws_have_target_moments() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let b = DVector::from_vec(vec![1.0, -0.5]);
        let chol = cholesky_jittered(q.clone(), "test").unwrap();
        let cov = q.clone().try_inverse().unwrap();
        let mean = &cov * &b;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let mut m = DVector::zeros(2);
        let mut s = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = sample_precision_form(&chol, &b, &mut rng);
            m += &x;
            s += &x * x.transpose();
        }
        m /= n as f64;
        s /= n as f64;
        s -= &m * m.transpose();
        assert!((&m - &mean).amax() < 0.02);
        assert!((&s - &cov).amax() < 0.02);
    }
}
