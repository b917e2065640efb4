//! Small dense linear-algebra helpers shared by the model modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Relative cutoff below which eigenvalues are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

/// Moore–Penrose pseudoinverse of a symmetric matrix together with its numerical rank.
pub fn sym_pinv(m: &DMatrix<f64>, rtol: f64) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let cut = rtol * max;
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if max > 0.0 && lam.abs() > cut {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    (symmetrized(&out), rank)
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrized(m))
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = cholesky(m)?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = symmetrized(&chol.inverse());
    Some((inv, logdet))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    spd_inverse_logdet(m).map(|(inv, _)| inv)
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn quad_form(x: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Symmetric PSD square root factor `L` with `L Lᵀ = m`, clipping tiny negative eigenvalues.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    let mut l = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(k).scale_mut(s);
    }
    l
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}
