//! Multi-right-hand-side solvers for shifted systems and the solve ledger.
//!
//! Both backends work on the Schur complement `S = F - D2 G^{-1} D1` of the
//! diagonal leading block `G`. The direct backend factors `S` as a band matrix;
//! the iterative backend runs Jacobi-preconditioned CG when the operator is real
//! and BiCGStab otherwise. Every returned column is checked against the full
//! operator: `|M x - b| <= tol |b|`, or an error is returned.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::banded::BandedLu;
use crate::error::{Error, Result};
use crate::forward::ShiftedSystem;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub backend: Backend,
    pub tol: f64,
    pub maxit: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig::basis()
    }
}

impl SolveConfig {
    /// Tight tolerance used when building interpolation bases.
    pub fn basis() -> Self {
        SolveConfig {
            backend: Backend::Direct,
            tol: 1e-10,
            maxit: 5000,
        }
    }

    /// Tolerance used inside the optimization loop.
    pub fn optimization() -> Self {
        SolveConfig {
            tol: 1e-8,
            ..SolveConfig::basis()
        }
    }

    pub fn iterative(tol: f64, maxit: usize) -> Self {
        SolveConfig {
            backend: Backend::Iterative,
            tol,
            maxit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::config(format!("solver tolerance must lie in (0, 1), got {}", self.tol)));
        }
        if self.maxit == 0 {
            return Err(Error::config("iteration cap must be at least 1"));
        }
        Ok(())
    }
}

/// Counts of large (dimension `n`) and small (dimension `r`) solves, one per right-hand side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveLedger {
    pub large_solves: u64,
    pub small_solves: u64,
}

impl SolveLedger {
    pub fn record_large(&mut self, rhs: usize) {
        self.large_solves += rhs as u64;
    }

    pub fn record_small(&mut self, rhs: usize) {
        self.small_solves += rhs as u64;
    }

    pub fn merge(&mut self, other: &SolveLedger) {
        self.large_solves += other.large_solves;
        self.small_solves += other.small_solves;
    }

    /// Solves recorded after `earlier` was taken.
    pub fn since(&self, earlier: &SolveLedger) -> SolveLedger {
        SolveLedger {
            large_solves: self.large_solves - earlier.large_solves,
            small_solves: self.small_solves - earlier.small_solves,
        }
    }
}

struct SchurMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> SchurMatrix<T> {
    fn build(op: &ShiftedSystem<'_>, g: &[Complex64]) -> Result<Self> {
        let lead = op.n_lead;
        let n = op.dim();
        let off = op.off;
        for f in 0..lead {
            if off.row(f).0.iter().any(|&c| c < lead) {
                return Err(Error::Structure(format!(
                    "leading block is not diagonal (row {f})"
                )));
            }
        }
        let m = n - lead;
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        let mut row: Vec<(usize, Complex64)> = Vec::new();
        for i in lead..n {
            row.clear();
            row.push((i - lead, op.diag[i]));
            let (ci, vi) = off.row(i);
            for (&c, &v) in ci.iter().zip(vi) {
                if c >= lead {
                    row.push((c - lead, Complex64::new(v, 0.0)));
                } else {
                    let scale = v / g[c];
                    let (cf, vf) = off.row(c);
                    for (&cc, &vv) in cf.iter().zip(vf) {
                        row.push((cc - lead, -scale * vv));
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for &(c, v) in row.iter() {
                if c == last {
                    let k = vals.len() - 1;
                    vals[k] += T::from_c64(v);
                } else {
                    cols.push(c);
                    vals.push(T::from_c64(v));
                    last = c;
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(SchurMatrix {
            n: m,
            row_ptr,
            cols,
            vals,
        })
    }

    fn bandwidths(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for i in 0..self.n {
            for &c in &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]] {
                if c < i {
                    kl = kl.max(i - c);
                } else {
                    ku = ku.max(c - i);
                }
            }
        }
        (kl, ku)
    }

    fn to_banded(&self) -> BandedLu<T> {
        let (kl, ku) = self.bandwidths();
        let mut band = BandedLu::zeros(self.n, kl, ku);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                band.add(i, self.cols[k], self.vals[k]);
            }
        }
        band
    }

    fn get(&self, i: usize, j: usize) -> T {
        let s = self.row_ptr[i];
        let e = self.row_ptr[i + 1];
        match self.cols[s..e].binary_search(&j) {
            Ok(k) => self.vals[s + k],
            Err(_) => T::zero(),
        }
    }

    fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).all(|k| {
                let j = self.cols[k];
                (self.vals[k] - self.get(j, i)).abs_sq() <= 1e-28 * self.vals[k].abs_sq().max(1.0)
            })
        })
    }

    fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    fn apply(&self, x: &[T], y: &mut [T], transpose: bool) {
        if transpose {
            y.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..self.n {
                let xi = x[i];
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    y[self.cols[k]] += self.vals[k] * xi;
                }
            }
        } else {
            for i in 0..self.n {
                let mut acc = T::zero();
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[k] * x[self.cols[k]];
                }
                y[i] = acc;
            }
        }
    }
}

enum Kernel<T: Scalar> {
    Band(BandedLu<T>),
    Krylov { mat: SchurMatrix<T>, inv_diag: Vec<T> },
}

enum Inner {
    Real(Kernel<f64>),
    Complex(Kernel<Complex64>),
}

/// A prepared shifted system: factored (direct) or preconditioned (iterative).
/// One factorization serves forward and transposed solves.
pub struct Factorization<'a> {
    op: &'a ShiftedSystem<'a>,
    g: Vec<Complex64>,
    inner: Inner,
    config: SolveConfig,
}

impl<'a> Factorization<'a> {
    pub fn new(op: &'a ShiftedSystem<'a>, config: &SolveConfig) -> Result<Self> {
        config.validate()?;
        let lead = op.n_lead;
        let g: Vec<Complex64> = op.diag[..lead].to_vec();
        if let Some(row) = g.iter().position(|z| z.norm_sqr() == 0.0 || !z.norm_sqr().is_finite()) {
            return Err(Error::Singular { row });
        }
        let real = op.is_real();
        let shift = |e: Error| match e {
            Error::Singular { row } => Error::Singular { row: row + lead },
            other => other,
        };
        let inner = match (real, config.backend) {
            (true, Backend::Direct) => {
                let s = SchurMatrix::<f64>::build(op, &g)?;
                Inner::Real(Kernel::Band(s.to_banded().factor().map_err(shift)?))
            }
            (false, Backend::Direct) => {
                let s = SchurMatrix::<Complex64>::build(op, &g)?;
                Inner::Complex(Kernel::Band(s.to_banded().factor().map_err(shift)?))
            }
            (true, Backend::Iterative) => {
                let s = SchurMatrix::<f64>::build(op, &g)?;
                if s.is_symmetric() {
                    Inner::Real(krylov_kernel(s).map_err(shift)?)
                } else {
                    let s = SchurMatrix::<Complex64>::build(op, &g)?;
                    Inner::Complex(krylov_kernel(s).map_err(shift)?)
                }
            }
            (false, Backend::Iterative) => {
                let s = SchurMatrix::<Complex64>::build(op, &g)?;
                Inner::Complex(krylov_kernel(s).map_err(shift)?)
            }
        };
        Ok(Factorization {
            op,
            g,
            inner,
            config: *config,
        })
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    /// Solves `M X = B` column by column; records one large solve per column.
    pub fn solve(&self, rhs: &DMatrix<Complex64>, ledger: &mut SolveLedger) -> Result<DMatrix<Complex64>> {
        self.solve_block(rhs, false, ledger)
    }

    /// Solves `M^T X = B` (plain transpose).
    pub fn solve_transpose(
        &self,
        rhs: &DMatrix<Complex64>,
        ledger: &mut SolveLedger,
    ) -> Result<DMatrix<Complex64>> {
        self.solve_block(rhs, true, ledger)
    }

    fn solve_block(
        &self,
        rhs: &DMatrix<Complex64>,
        transpose: bool,
        ledger: &mut SolveLedger,
    ) -> Result<DMatrix<Complex64>> {
        let n = self.dim();
        if rhs.nrows() != n {
            return Err(Error::Structure(format!(
                "right-hand side has {} rows for an operator of dimension {n}",
                rhs.nrows()
            )));
        }
        if rhs.ncols() == 0 {
            return Err(Error::config("right-hand side block has no columns"));
        }
        let mut out = DMatrix::zeros(n, rhs.ncols());
        for j in 0..rhs.ncols() {
            let b: Vec<Complex64> = rhs.column(j).iter().copied().collect();
            let x = self.solve_checked(&b, transpose)?;
            out.column_mut(j).copy_from_slice(&x);
        }
        ledger.record_large(rhs.ncols());
        Ok(out)
    }

    fn solve_checked(&self, b: &[Complex64], transpose: bool) -> Result<Vec<Complex64>> {
        let bnorm = norm(b);
        if bnorm == 0.0 {
            return Ok(vec![Complex64::default(); b.len()]);
        }
        let tol = self.config.tol;
        let mut x = self.solve_raw(b, transpose)?;
        let mut res = self.residual(&x, b, transpose);
        let mut rel = norm(&res) / bnorm;
        // iterative refinement against the full operator
        let mut sweeps = 0;
        while !(rel <= tol) && sweeps < 3 && matches!(self.config.backend, Backend::Direct) {
            let dx = self.solve_raw(&res, transpose)?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            res = self.residual(&x, b, transpose);
            rel = norm(&res) / bnorm;
            sweeps += 1;
        }
        if !(rel <= tol) {
            return Err(Error::Residual { residual: rel, tol });
        }
        Ok(x)
    }

    fn residual(&self, x: &[Complex64], b: &[Complex64], transpose: bool) -> Vec<Complex64> {
        let mx = if transpose {
            self.op.apply_transpose(x)
        } else {
            self.op.apply(x)
        };
        b.iter().zip(&mx).map(|(bi, mi)| bi - mi).collect()
    }

    fn solve_raw(&self, b: &[Complex64], transpose: bool) -> Result<Vec<Complex64>> {
        let lead = self.op.n_lead;
        let n = self.dim();
        let off = self.op.off;
        // y1 = G^{-1} b1
        let y1: Vec<Complex64> = (0..lead).map(|f| b[f] / self.g[f]).collect();
        // rhs2 = b2 - (D2 or D1^T) y1
        let mut rhs2: Vec<Complex64> = b[lead..].to_vec();
        if transpose {
            for f in 0..lead {
                let (cols, vals) = off.row(f);
                for (&c, &v) in cols.iter().zip(vals) {
                    rhs2[c - lead] -= y1[f] * v;
                }
            }
        } else {
            for i in lead..n {
                let (cols, vals) = off.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    if c < lead {
                        rhs2[i - lead] -= y1[c] * v;
                    }
                }
            }
        }
        let x2 = match &self.inner {
            Inner::Real(k) => {
                let re: Vec<f64> = rhs2.iter().map(|z| z.re).collect();
                let im: Vec<f64> = rhs2.iter().map(|z| z.im).collect();
                let xr = kernel_solve(k, re, transpose, &self.config)?;
                let xi = if im.iter().any(|&v| v != 0.0) {
                    kernel_solve(k, im, transpose, &self.config)?
                } else {
                    vec![0.0; xr.len()]
                };
                xr.into_iter().zip(xi).map(|(r, i)| Complex64::new(r, i)).collect::<Vec<_>>()
            }
            Inner::Complex(k) => kernel_solve(k, rhs2, transpose, &self.config)?,
        };
        // x1 = G^{-1} (b1 - (D1 or D2^T) x2)
        let mut t1: Vec<Complex64> = b[..lead].to_vec();
        if transpose {
            for i in lead..n {
                let (cols, vals) = off.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    if c < lead {
                        t1[c] -= x2[i - lead] * v;
                    }
                }
            }
        } else {
            for f in 0..lead {
                let (cols, vals) = off.row(f);
                for (&c, &v) in cols.iter().zip(vals) {
                    t1[f] -= x2[c - lead] * v;
                }
            }
        }
        let mut x = Vec::with_capacity(n);
        x.extend(t1.iter().zip(&self.g).map(|(t, g)| t / g));
        x.extend(x2);
        Ok(x)
    }
}

fn krylov_kernel<T: Scalar>(mat: SchurMatrix<T>) -> Result<Kernel<T>> {
    let d = mat.diagonal();
    if let Some(row) = d.iter().position(|v| v.abs_sq() == 0.0) {
        return Err(Error::Singular { row });
    }
    let inv_diag = d.into_iter().map(|v| T::one() / v).collect();
    Ok(Kernel::Krylov { mat, inv_diag })
}

fn kernel_solve<T: KrylovScalar>(k: &Kernel<T>, mut b: Vec<T>, transpose: bool, cfg: &SolveConfig) -> Result<Vec<T>> {
    match k {
        Kernel::Band(lu) => {
            if transpose {
                lu.solve_transpose_in_place(&mut b);
            } else {
                lu.solve_in_place(&mut b);
            }
            Ok(b)
        }
        Kernel::Krylov { mat, inv_diag } => T::krylov(mat, inv_diag, &b, transpose, cfg),
    }
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    libm::sqrt(v.iter().map(|x| x.abs_sq()).sum())
}

trait KrylovScalar: Scalar {
    fn krylov(mat: &SchurMatrix<Self>, inv_diag: &[Self], b: &[Self], transpose: bool, cfg: &SolveConfig)
        -> Result<Vec<Self>>;
}

impl KrylovScalar for f64 {
    fn krylov(mat: &SchurMatrix<f64>, inv_diag: &[f64], b: &[f64], transpose: bool, cfg: &SolveConfig) -> Result<Vec<f64>> {
        // only symmetric real operators reach this path
        let _ = transpose;
        pcg(mat, inv_diag, b, cfg)
    }
}

impl KrylovScalar for Complex64 {
    fn krylov(
        mat: &SchurMatrix<Complex64>,
        inv_diag: &[Complex64],
        b: &[Complex64],
        transpose: bool,
        cfg: &SolveConfig,
    ) -> Result<Vec<Complex64>> {
        bicgstab(mat, inv_diag, b, transpose, cfg)
    }
}

// Inner Krylov iterations target a tenth of the requested tolerance on the reduced
// system so that the full-operator check has room to pass.
const INNER_MARGIN: f64 = 0.1;

fn pcg(mat: &SchurMatrix<f64>, inv_diag: &[f64], b: &[f64], cfg: &SolveConfig) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let target = INNER_MARGIN * cfg.tol * bnorm;
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for it in 0..cfg.maxit {
        mat.apply(&p, &mut q, false);
        let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        if !(pq > 0.0) {
            return Err(Error::NotConverged {
                iterations: it,
                residual: norm(&r) / bnorm,
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if norm(&r) <= target {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.maxit,
        residual: norm(&r) / bnorm,
    })
}

fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn bicgstab(
    mat: &SchurMatrix<Complex64>,
    inv_diag: &[Complex64],
    b: &[Complex64],
    transpose: bool,
    cfg: &SolveConfig,
) -> Result<Vec<Complex64>> {
    let n = b.len();
    let zero = Complex64::default();
    let bnorm = norm(b);
    let mut x = vec![zero; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let target = INNER_MARGIN * cfg.tol * bnorm;
    let precond = |v: &[Complex64]| -> Vec<Complex64> { v.iter().zip(inv_diag).map(|(a, d)| a * d).collect() };
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut rho = Complex64::new(1.0, 0.0);
    let mut alpha = Complex64::new(1.0, 0.0);
    let mut omega = Complex64::new(1.0, 0.0);
    let mut v = vec![zero; n];
    let mut p = vec![zero; n];
    let mut s = vec![zero; n];
    let mut t = vec![zero; n];
    for it in 0..cfg.maxit {
        let rho_new = cdot(&r_hat, &r);
        if rho_new.norm() == 0.0 || omega.norm() == 0.0 {
            return Err(Error::NotConverged {
                iterations: it,
                residual: norm(&r) / bnorm,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        mat.apply(&ph, &mut v, transpose);
        let denom = cdot(&r_hat, &v);
        if denom.norm() == 0.0 {
            return Err(Error::NotConverged {
                iterations: it,
                residual: norm(&r) / bnorm,
            });
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= target {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            return Ok(x);
        }
        let sh = precond(&s);
        mat.apply(&sh, &mut t, transpose);
        let tt = cdot(&t, &t);
        omega = if tt.norm() == 0.0 { zero } else { cdot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= target {
            return Ok(x);
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.maxit,
        residual: norm(&r) / bnorm,
    })
}

/// Factors `op` and solves `op X = rhs`.
pub fn solve_multi(
    op: &ShiftedSystem<'_>,
    rhs: &DMatrix<Complex64>,
    config: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<DMatrix<Complex64>> {
    Factorization::new(op, config)?.solve(rhs, ledger)
}

/// Factors `op` and solves `op^T X = rhs`.
pub fn solve_adjoint_multi(
    op: &ShiftedSystem<'_>,
    rhs: &DMatrix<Complex64>,
    config: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<DMatrix<Complex64>> {
    Factorization::new(op, config)?.solve_transpose(rhs, ledger)
}
