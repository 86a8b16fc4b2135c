//! Small dense linear-algebra helpers shared by the precoders, the
//! Bussgang estimator and the GNN.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::CMatrix;

/// Solve `A X = B` for Hermitian positive-definite `A` via Cholesky.
pub fn solve_hpd(a: &CMatrix, b: &CMatrix) -> Option<CMatrix> {
    let chol = a.clone().cholesky()?;
    Some(chol.solve(b))
}

pub fn hermitian_eigenvalues(a: &CMatrix) -> DVector<f64> {
    a.clone().symmetric_eigenvalues()
}

/// 2-norm condition number of a Hermitian positive semi-definite matrix.
pub fn hpd_condition_number(a: &CMatrix) -> f64 {
    let ev = hermitian_eigenvalues(a);
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

pub fn frobenius_sq(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// `c = alpha * op(a) * op(b) + beta * c` on column-major f64 matrices,
/// where `op` optionally transposes. Shapes are checked.
pub fn gemm(
    alpha: f64,
    a: &DMatrix<f64>,
    ta: bool,
    b: &DMatrix<f64>,
    tb: bool,
    beta: f64,
    c: &mut DMatrix<f64>,
) {
    let (m, ka) = if ta {
        (a.ncols(), a.nrows())
    } else {
        (a.nrows(), a.ncols())
    };
    let (kb, n) = if tb {
        (b.ncols(), b.nrows())
    } else {
        (b.nrows(), b.ncols())
    };
    assert_eq!(ka, kb, "inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if ka == 0 {
        *c *= beta;
        return;
    }
    // Column-major: element (i, j) at i + j * nrows.
    let (ars, acs) = if ta {
        (a.nrows() as isize, 1)
    } else {
        (1, a.nrows() as isize)
    };
    let (brs, bcs) = if tb {
        (b.nrows() as isize, 1)
    } else {
        (1, b.nrows() as isize)
    };
    let crs = 1isize;
    let ccs = c.nrows() as isize;
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            alpha,
            a.as_ptr(),
            ars,
            acs,
            b.as_ptr(),
            brs,
            bcs,
            beta,
            c.as_mut_ptr(),
            crs,
            ccs,
        );
    }
}
