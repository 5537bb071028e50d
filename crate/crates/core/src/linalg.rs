//! Dense linear-algebra helpers shared by every module.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Symmetric routines
//! sort eigenpairs in descending order so callers can rely on a fixed layout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues descending, eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(m: &DMatrix<f64>) -> SymEigen {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    SymEigen { values, vectors }
}

impl SymEigen {
    /// `U f(Λ) Uᵀ`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |r, c| {
            self.vectors[(r, c)] * f(self.values[c])
        });
        &scaled * self.vectors.transpose()
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest absolute entry of `m - mᵀ`, relative to `max(1, max|m|)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose())) / max_abs(m).max(1.0)
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_square() && asymmetry(m) <= 1e-14 {
        let eig = sym_eigen(m);
        return eig.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    }
    let gram = m.transpose() * m;
    sym_eigen(&gram).values[0].max(0.0).sqrt()
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Domain(format!("{what} is singular")))
}

/// `m^p` by repeated squaring; `p = 0` gives the identity.
pub fn mat_pow(m: &DMatrix<f64>, mut p: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    while p > 0 {
        if p & 1 == 1 {
            result = &result * &base;
        }
        p >>= 1;
        if p > 0 {
            base = &base * &base;
        }
    }
    result
}

pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(AB) = sum_ij A_ij B_ji
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // column-major fill, matching nalgebra storage order
    DMatrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// First `cols` columns of a Haar-distributed orthogonal `dim × dim` matrix.
///
/// QR of a Gaussian matrix with the signs of `R`'s diagonal folded into `Q`.
pub fn haar_frame<R: Rng + ?Sized>(dim: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(cols <= dim && cols > 0);
    let g = standard_normal_matrix(dim, cols, rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn haar_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    haar_frame(dim, dim, rng)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Domain("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eigen_sorted_descending_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let eig = sym_eigen(&m);
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        let back = eig.apply(|x| x);
        assert!(max_abs(&(back - &m)) < 1e-12);
    }

    #[test]
    fn mat_pow_matches_repeated_product() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.9]);
        let mut naive = DMatrix::identity(2, 2);
        for _ in 0..13 {
            naive = &naive * &m;
        }
        assert!(max_abs(&(mat_pow(&m, 13) - naive)) < 1e-14);
        assert_eq!(mat_pow(&m, 0), DMatrix::identity(2, 2));
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = haar_orthogonal(7, &mut rng);
        let err = max_abs(&(q.transpose() * &q - DMatrix::identity(7, 7)));
        assert!(err < 1e-12);
        let frame = haar_frame(9, 3, &mut rng);
        assert!(max_abs(&(frame.transpose() * &frame - DMatrix::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn op_norm_of_nonsymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert!((op_norm(&m) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_inverse_is_domain_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(inverse(&m, "test"), Err(Error::Domain(_))));
    }
}
