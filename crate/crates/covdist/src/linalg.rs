//! Small dense linear-algebra helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Eigendecomposition of a real symmetric matrix with eigenvalues ascending.
pub fn sym_eigen_sorted(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Eigendecomposition of a complex Hermitian matrix with eigenvalues ascending.
pub fn herm_eigen_sorted(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMatrix::from_fn(a.nrows(), a.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Eigenvalues of a general real matrix.
pub fn real_eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    a.complex_eigenvalues().iter().cloned().collect()
}

/// Eigenvalues of a general complex matrix via a complex Schur form.
pub fn complex_eigenvalues(a: &CMatrix) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-15, 10_000 * n.max(1))
        .ok_or_else(|| Error::Numerical("complex Schur iteration did not converge".into()))?;
    let (_, t) = schur.unpack();
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

fn split(a: &CMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    (a.map(|z| z.re), a.map(|z| z.im))
}

/// Complex matrix product `a * b^T` carried out with real products.
pub fn cmul_transpose(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ai) = split(a);
    let (br, bi) = split(b);
    let re = &ar * br.transpose() - &ai * bi.transpose();
    let im = &ar * bi.transpose() + &ai * br.transpose();
    CMatrix::from_fn(re.nrows(), re.ncols(), |i, j| Complex64::new(re[(i, j)], im[(i, j)]))
}

/// Elementwise squared modulus of `a^H b`, the overlap matrix of two bases.
pub fn overlap_sq(a: &Basis, b: &Basis) -> DMatrix<f64> {
    match (a, b) {
        (Basis::Real(x), Basis::Real(y)) => (x.transpose() * y).map(|v| v * v),
        _ => {
            let x = a.to_complex();
            let y = b.to_complex();
            (x.adjoint() * y).map(|v| v.norm_sqr())
        }
    }
}

/// Orthonormal eigenbasis stored in the cheapest field that represents it.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Real(DMatrix<f64>),
    Complex(CMatrix),
}

impl Basis {
    pub fn dim(&self) -> usize {
        match self {
            Basis::Real(m) => m.nrows(),
            Basis::Complex(m) => m.nrows(),
        }
    }

    pub fn to_complex(&self) -> CMatrix {
        match self {
            Basis::Real(m) => m.map(|v| Complex64::new(v, 0.0)),
            Basis::Complex(m) => m.clone(),
        }
    }

    /// Rebuilds `E diag(values) E^H`.
    pub fn reconstruct(&self, values: &[f64]) -> CMatrix {
        let e = self.to_complex();
        let d = DVector::from_iterator(
            values.len(),
            values.iter().map(|&v| Complex64::new(v, 0.0)),
        );
        let scaled = CMatrix::from_fn(e.nrows(), e.ncols(), |r, c| e[(r, c)] * d[c]);
        scaled * e.adjoint()
    }
}
