//! Banded LU factorization without pivoting.
//!
//! The Schur-reduced diffusion operators have a real part that is positive
//! definite, so elimination without row exchanges is stable and keeps the
//! band intact. A zero (or non-finite) pivot is reported as singular.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BandedLu<T> {
    n: usize,
    kl: usize,
    ku: usize,
    // row-major band: entry (i, j) lives at i * width + (j + kl - i)
    data: Vec<T>,
}

impl<T: Scalar> BandedLu<T> {
    /// Empty band matrix ready to be filled with [`BandedLu::add`].
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        BandedLu {
            n,
            kl,
            ku,
            data: vec![T::zero(); n * (kl + ku + 1)],
        }
    }

    #[inline]
    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width() + (j + self.kl - i)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    /// Accumulates `v` into entry `(i, j)`, which must lie inside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "({i}, {j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if j + self.kl < i || j > i + self.ku {
            T::zero()
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// In-place LU. Returns the factored matrix (unit lower L below the diagonal, U on and above).
    pub fn factor(mut self) -> Result<Self> {
        let n = self.n;
        let w = self.width();
        let (kl, ku) = (self.kl, self.ku);
        for k in 0..n {
            let pivot = self.data[k * w + kl];
            let pm = pivot.abs_sq();
            if pm == 0.0 || !pm.is_finite() {
                return Err(Error::Singular { row: k });
            }
            let inv = T::one() / pivot;
            let jmax = (k + ku).min(n - 1);
            let imax = (k + kl).min(n - 1);
            let (head, tail) = self.data.split_at_mut((k + 1) * w);
            let prow = &head[k * w + kl + 1..k * w + kl + 1 + (jmax - k)];
            for i in k + 1..=imax {
                let base = (i - k - 1) * w;
                let lk = base + (k + kl - i);
                let l = tail[lk] * inv;
                tail[lk] = l;
                if l.abs_sq() == 0.0 {
                    continue;
                }
                let start = base + (k + 1 + kl - i);
                let row = &mut tail[start..start + (jmax - k)];
                for (a, &u) in row.iter_mut().zip(prow) {
                    *a -= l * u;
                }
            }
        }
        Ok(self)
    }

    /// Overwrites `b` with `A^{-1} b` (after [`BandedLu::factor`]).
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let w = self.width();
        let (kl, ku) = (self.kl, self.ku);
        for i in 0..n {
            let j0 = i.saturating_sub(kl);
            let mut acc = b[i];
            let row = &self.data[i * w..];
            for j in j0..i {
                acc -= row[j + kl - i] * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let j1 = (i + ku).min(n - 1);
            let row = &self.data[i * w..];
            let mut acc = b[i];
            for j in i + 1..=j1 {
                acc -= row[j + kl - i] * b[j];
            }
            b[i] = acc / row[kl];
        }
    }

    /// Overwrites `b` with `A^{-T} b` (plain transpose, no conjugation).
    pub fn solve_transpose_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let w = self.width();
        let (kl, ku) = (self.kl, self.ku);
        // U^T z = b (forward, column-oriented over rows of U)
        for i in 0..n {
            let row = &self.data[i * w..];
            let zi = b[i] / row[kl];
            b[i] = zi;
            let j1 = (i + ku).min(n - 1);
            for j in i + 1..=j1 {
                let u = row[j + kl - i];
                b[j] -= u * zi;
            }
        }
        // L^T x = z (backward)
        for i in (0..n).rev() {
            let xi = b[i];
            let row = &self.data[i * w..];
            let j0 = i.saturating_sub(kl);
            for j in j0..i {
                let l = row[j + kl - i];
                b[j] -= l * xi;
            }
        }
    }

    /// Diagonal of U after factorization (the elimination pivots).
    pub fn pivots(&self) -> Vec<T> {
        (0..self.n).map(|i| self.data[i * self.width() + self.kl]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use num_complex::Complex64;

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> (BandedLu<Complex64>, DMatrix<Complex64>) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut band = BandedLu::zeros(n, kl, ku);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let mut v = Complex64::new(next(), next());
                if i == j {
                    v += Complex64::new(4.0 + (kl + ku) as f64, 0.0);
                }
                band.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        (band, dense)
    }

    #[test]
    fn solve_and_transpose_solve_match_dense() {
        let (band, dense) = random_banded(23, 3, 5, 7);
        let lu = band.factor().unwrap();
        let b: Vec<Complex64> = (0..23).map(|i| Complex64::new(i as f64, 1.0 - i as f64)).collect();
        let bd = DMatrix::from_column_slice(23, 1, &b);

        let mut x = b.clone();
        lu.solve_in_place(&mut x);
        let xd = dense.clone().lu().solve(&bd).unwrap();
        for i in 0..23 {
            assert!((x[i] - xd[i]).norm() < 1e-12);
        }

        let mut y = b.clone();
        lu.solve_transpose_in_place(&mut y);
        let yd = dense.transpose().lu().solve(&bd).unwrap();
        for i in 0..23 {
            assert!((y[i] - yd[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_pivot_is_singular() {
        let mut band = BandedLu::<f64>::zeros(3, 1, 1);
        band.add(0, 0, 1.0);
        band.add(2, 2, 1.0);
        assert_eq!(band.factor().unwrap_err(), Error::Singular { row: 1 });
    }
}
