//! Hermitian-matrix utilities built on nalgebra's symmetric eigensolver.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::{Error, Result};

/// Replace `m` by its Hermitian part (m + m†)/2, killing rounding drift.
pub(crate) fn hermitize(m: &mut DMatrix<C64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        m[(i, i)] = C64::new(m[(i, i)].re, 0.0);
    }
}

/// Maximum |m_ij - conj(m_ji)| over all entries.
pub(crate) fn hermiticity_deviation(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

/// Eigendecomposition of a Hermitian matrix: (eigenvalues, eigenvectors).
pub(crate) fn herm_eigen(m: &DMatrix<C64>) -> (DVector<f64>, DMatrix<C64>) {
    let eig = m.clone().symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

pub(crate) fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let (vals, _) = herm_eigen(m);
    vals.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Square root of a Hermitian PSD matrix. Eigenvalues below `-neg_tol` are
/// treated as an error; small negatives inside the tolerance are clamped to
/// zero.
pub(crate) fn sqrt_psd(m: &DMatrix<C64>, neg_tol: f64) -> Result<DMatrix<C64>> {
    let (vals, vecs) = herm_eigen(m);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -neg_tol {
        return Err(Error::NotPositive { min_eig: min });
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| C64::new(v.max(0.0).sqrt(), 0.0)));
    Ok(&vecs * d * vecs.adjoint())
}

/// Uhlmann fidelity (Tr sqrt(sqrt(a) b sqrt(a)))^2 between two normalized
/// Hermitian PSD matrices.
pub(crate) fn uhlmann(a: &DMatrix<C64>, b: &DMatrix<C64>, neg_tol: f64) -> Result<f64> {
    let sa = sqrt_psd(a, neg_tol)?;
    uhlmann_with_sqrt(&sa, b, neg_tol)
}

/// Uhlmann fidelity when sqrt(a) is already available (parameter scans reuse
/// one operator against many candidates).
pub(crate) fn uhlmann_with_sqrt(
    sqrt_a: &DMatrix<C64>,
    b: &DMatrix<C64>,
    neg_tol: f64,
) -> Result<f64> {
    let min_b = min_eigenvalue(b);
    if min_b < -neg_tol {
        return Err(Error::NotPositive { min_eig: min_b });
    }
    let m = sqrt_a * b * sqrt_a;
    let (vals, _) = herm_eigen(&m);
    let root_sum: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((root_sum * root_sum).clamp(0.0, 1.0 + 1e-9).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn sqrt_of_projector() {
        // |+><+| is its own square root
        let half = c(0.5, 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[half, half, half, half]);
        let s = sqrt_psd(&m, 1e-12).unwrap();
        let err = (&s * &s - &m).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let m = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-0.5, 0.0)]);
        assert!(matches!(sqrt_psd(&m, 1e-10), Err(Error::NotPositive { .. })));
    }

    #[test]
    fn uhlmann_orthogonal_and_equal() {
        let p0 = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let p1 = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(uhlmann(&p0, &p1, 1e-12).unwrap() < 1e-14);
        assert!((uhlmann(&p0, &p0, 1e-12).unwrap() - 1.0).abs() < 1e-12);
    }
}
