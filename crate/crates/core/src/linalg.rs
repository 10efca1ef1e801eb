//! Dense factorizations on top of nalgebra.
//!
//! A row-major `batch × k` [`Tensor`] has exactly the memory layout of a
//! column-major `k × batch` matrix, so batches convert to right-hand-side
//! blocks without copying element by element.

use nalgebra::{DMatrix, Dyn, LU};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular or numerically singular ({0})")]
    Singular(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("SVD did not converge")]
    Svd,
}

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `batch × k` tensor → `k × batch` matrix whose columns are the rows.
pub fn batch_to_columns(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_column_slice(t.cols(), t.rows(), t.data())
}

/// Inverse of [`batch_to_columns`].
pub fn columns_to_batch(m: DMatrix<f64>) -> Tensor {
    let (k, b) = (m.nrows(), m.ncols());
    Tensor::from_vec(b, k, m.as_slice().to_vec()).expect("sizes agree")
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>, LinalgError> {
    let svd = m.clone().try_svd(false, false, f64::EPSILON, 0).ok_or(LinalgError::Svd)?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// 2-norm condition number; `inf` for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    let sv = singular_values(m)?;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if min == 0.0 { f64::INFINITY } else { max / min })
}

/// Moore–Penrose pseudoinverse.
pub fn pinv(t: &Tensor) -> Result<Tensor, LinalgError> {
    let m = to_dmatrix(t);
    let svd = m.try_svd(true, true, f64::EPSILON, 0).ok_or(LinalgError::Svd)?;
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = f64::EPSILON * (t.rows().max(t.cols()) as f64) * max_sv;
    let p = svd.pseudo_inverse(tol).map_err(|e| LinalgError::Singular(e.to_string()))?;
    Ok(from_dmatrix(&p))
}

/// LU factorization with partial pivoting supporting solves with the matrix
/// and with its transpose.
#[derive(Clone, Debug)]
pub struct LuFactor {
    n: usize,
    lu: LU<f64, Dyn, Dyn>,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl LuFactor {
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::Dimension(format!("LU of {}x{} matrix", m.nrows(), m.ncols())));
        }
        let n = m.nrows();
        let lu = m.lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if n > 0 && (min == 0.0 || !min.is_finite() || min <= max * 1e-14) {
            return Err(LinalgError::Singular(format!("pivot ratio {:e}", min / max)));
        }
        Ok(LuFactor { n, l: lu.l(), u, lu })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, LinalgError> {
        Self::new(to_dmatrix(t))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A X = B` for a column block `B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        self.lu
            .solve(b)
            .ok_or_else(|| LinalgError::Singular("LU solve".into()))
    }

    /// Solve `Aᵀ X = B`. With `P A = L U`, `Aᵀ = Uᵀ Lᵀ P`.
    pub fn solve_transpose(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        let w = self
            .u
            .tr_solve_upper_triangular(b)
            .ok_or_else(|| LinalgError::Singular("Uᵀ solve".into()))?;
        let mut v = self
            .l
            .tr_solve_lower_triangular(&w)
            .ok_or_else(|| LinalgError::Singular("Lᵀ solve".into()))?;
        self.lu.p().inv_permute_rows(&mut v);
        Ok(v)
    }

    /// Solve `A u = r` for every row `r` of a batch tensor.
    pub fn solve_rows(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        self.check_rows(rhs)?;
        Ok(columns_to_batch(self.solve(&batch_to_columns(rhs))?))
    }

    /// Solve `Aᵀ u = r` for every row `r` of a batch tensor.
    pub fn solve_transpose_rows(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        self.check_rows(rhs)?;
        Ok(columns_to_batch(self.solve_transpose(&batch_to_columns(rhs))?))
    }

    fn check_rows(&self, rhs: &Tensor) -> Result<(), LinalgError> {
        if rhs.cols() != self.n {
            return Err(LinalgError::Dimension(format!(
                "right-hand side rows of length {} for a {}x{} system",
                rhs.cols(),
                self.n,
                self.n
            )));
        }
        Ok(())
    }
}

/// Pick `k` columns of `a` forming a well-conditioned basis: greedy modified
/// Gram–Schmidt, taking the column with the largest remaining norm each time.
pub fn pivoted_column_basis(a: &Tensor, k: usize) -> Result<Vec<usize>, LinalgError> {
    let (rows, cols) = (a.rows(), a.cols());
    if k > rows || k > cols {
        return Err(LinalgError::Dimension(format!("{k} basis columns from a {rows}x{cols} matrix")));
    }
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a.get(i, j)).collect()).collect();
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; cols];
    for _ in 0..k {
        let (best, norm) = (0..cols)
            .filter(|j| !used[*j])
            .map(|j| (j, work[j].iter().map(|v| v * v).sum::<f64>().sqrt()))
            .fold((usize::MAX, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if norm <= 1e-12 {
            return Err(LinalgError::Singular("rank deficient while selecting basis".into()));
        }
        used[best] = true;
        chosen.push(best);
        let q: Vec<f64> = work[best].iter().map(|v| v / norm).collect();
        for j in 0..cols {
            if used[j] {
                continue;
            }
            let dot: f64 = work[j].iter().zip(&q).map(|(a, b)| a * b).sum();
            for (w, qi) in work[j].iter_mut().zip(&q) {
                *w -= dot * qi;
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        DMatrix::from_fn(n, n, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn solve_and_transpose_solve() {
        let a = sample(6, 1);
        let f = LuFactor::new(a.clone()).unwrap();
        let b = sample(6, 2).columns(0, 3).into_owned();
        let x = f.solve(&b).unwrap();
        assert!((&a * &x - &b).amax() < 1e-10);
        let y = f.solve_transpose(&b).unwrap();
        assert!((a.transpose() * &y - &b).amax() < 1e-10);
    }

    #[test]
    fn batch_layout_round_trip() {
        let t = Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let m = batch_to_columns(&t);
        assert_eq!(m.nrows(), 3);
        assert_eq!(m[(2, 1)], t.get(1, 2));
        assert_eq!(columns_to_batch(m), t);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(LuFactor::new(m).is_err());
    }

    #[test]
    fn pinv_of_wide_matrix_is_right_inverse() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, 1.0, -1.0]]).unwrap();
        let p = pinv(&a).unwrap();
        let ap = a.matmul(&p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ap.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basis_skips_dependent_columns() {
        // Column 1 duplicates column 0; columns {0 or 1, 2} form the basis.
        let a = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        let b = pivoted_column_basis(&a, 2).unwrap();
        assert!(b.contains(&2));
        assert_eq!(b.len(), 2);
    }
}
