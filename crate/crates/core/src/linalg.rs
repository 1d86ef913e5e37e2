//! Dense helpers shared by the reduced-order and diagnostic modules.

use alloc::vec::Vec;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative singular-value floor below which directions are treated as
/// numerically null, independent of any user truncation tolerance.
pub fn numerical_floor(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

/// Singular values (descending) and left singular vectors of a tall or wide
/// matrix, computed through a thin QR so that only a `k x k` SVD is needed.
pub fn thin_svd(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (m, n) = x.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(m, 0), Vec::new());
    }
    if m >= n {
        let qr = x.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let svd = r.svd(true, false);
        let u = q * svd.u.expect("requested U");
        (u, svd.singular_values.iter().copied().collect())
    } else {
        let svd = x.clone().svd(true, false);
        (svd.u.expect("requested U"), svd.singular_values.iter().copied().collect())
    }
}

/// Orthonormal basis for the range of `x`: left singular vectors whose singular
/// values satisfy `sigma >= max(rel_tol, floor) * sigma_max`.
/// Returns the basis and the full list of singular values.
pub fn orthonormal_range(x: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (u, s) = thin_svd(x);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 || !smax.is_finite() {
        return Err(Error::Degenerate("matrix has no nonzero singular value".into()));
    }
    let cut = rel_tol.max(numerical_floor(x.nrows(), x.ncols())) * smax;
    let keep = s.iter().take_while(|&&v| v >= cut && v > 0.0).count();
    Ok((u.columns(0, keep).into_owned(), s))
}

pub fn frobenius_c(a: &DMatrix<Complex64>) -> f64 {
    libm::sqrt(a.iter().map(|z| z.norm_sqr()).sum::<f64>())
}

/// `||a - b||_F / ||b||_F` (absolute difference when `b` vanishes).
pub fn rel_diff_c(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    let d = frobenius_c(&(a - b));
    let nb = frobenius_c(b);
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|x| Complex64::new(x, 0.0))
}

pub fn real_part(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    a.map(|z| z.re)
}

pub fn imag_part(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    a.map(|z| z.im)
}

/// Horizontal concatenation of equally tall blocks.
pub fn hcat<T: nalgebra::Scalar + num_traits::Zero>(blocks: &[&DMatrix<T>], rows: usize) -> DMatrix<T> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::from_element(rows, cols, T::zero());
    let mut c0 = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "block height mismatch");
        out.columns_mut(c0, b.ncols()).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicated_columns_collapse_to_rank() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 3.0, -1.0]);
        let xx = hcat(&[&x, &x], 4);
        let (q, s) = orthonormal_range(&xx, 0.0).unwrap();
        assert_eq!(q.ncols(), 2);
        assert_eq!(s.len(), 4);
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert!(matches!(orthonormal_range(&DMatrix::zeros(3, 2), 0.0), Err(Error::Degenerate(_))));
    }
}
