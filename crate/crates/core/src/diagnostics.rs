//! Analysis tools for the low-rank structure behind the reduced models.
//!
//! The perturbation checks work on the eliminated symmetric system
//! `A~(p) = A~(0) + diag(d)` at zero frequency. A diagonal change supported on
//! `k` nodes is written `U Xi U^T` with `U` a selection of unit vectors, and the
//! Sherman-Morrison-Woodbury formula places every change of `A~(p)^{-1} B~` in the
//! range of `A~(0)^{-1} U`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::forward::{assemble_system, Grid, MediumParams, SourceDetectorLayout};
use crate::linalg::{orthonormal_range, real_part, thin_svd, to_complex};
use crate::pals::PalsParams;
use crate::rom::realify_block;
use crate::solver::{Factorization, SolveConfig, SolveLedger};
use crate::sparse::CsrMatrix;
use crate::transfer::{schur_reduce, FullModel, SchurSystem};

/// Tolerances at which [`singular_value_report`] counts the numerical rank.
pub const RANK_LADDER: [f64; 3] = [1e-4, 1e-8, 1e-12];

#[derive(Debug, Clone, PartialEq)]
pub struct SingularValueReport {
    pub sigma: Vec<f64>,
    pub columns: usize,
    /// `(tol, #{sigma_k > tol * sigma_max})` for each rung of [`RANK_LADDER`].
    pub ranks: Vec<(f64, usize)>,
}

impl SingularValueReport {
    pub fn rank_at(&self, tol: f64) -> usize {
        rank_at(&self.sigma, tol)
    }

    /// `log10(sigma_max / sigma_min)` over the nonzero singular values.
    pub fn decades(&self) -> f64 {
        let lo = self.sigma.iter().rev().find(|&&s| s > 0.0);
        match (self.sigma.first(), lo) {
            (Some(&hi), Some(&lo)) => libm::log10(hi / lo),
            _ => 0.0,
        }
    }
}

fn rank_at(sigma: &[f64], tol: f64) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0);
    sigma.iter().filter(|&&s| s > tol * smax && s > 0.0).count()
}

pub fn singular_value_report(x: &DMatrix<f64>) -> SingularValueReport {
    let (_, sigma) = thin_svd(x);
    let ranks = RANK_LADDER.iter().map(|&t| (t, rank_at(&sigma, t))).collect();
    SingularValueReport {
        sigma,
        columns: x.ncols(),
        ranks,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleReport {
    /// Cosines of the canonical angles, nonincreasing, in `[0, 1]`.
    pub cosines: Vec<f64>,
    pub dim_u: usize,
    pub dim_w: usize,
}

impl AngleReport {
    pub fn min_cosine(&self) -> f64 {
        self.cosines.last().copied().unwrap_or(1.0)
    }

    /// The largest `floor(fraction * len)` cosines (at least one when any exist).
    pub fn leading(&self, fraction: f64) -> &[f64] {
        let n = self.cosines.len();
        let k = ((fraction * n as f64) as usize).clamp(n.min(1), n);
        &self.cosines[..k]
    }
}

/// Canonical angles between the column spaces of `u` and `w`. Both inputs are
/// orthonormalized first, dropping numerically null directions.
pub fn canonical_angles(u: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<AngleReport> {
    if u.nrows() != w.nrows() {
        return Err(Error::config(format!(
            "subspaces live in different spaces ({} vs {} rows)",
            u.nrows(),
            w.nrows()
        )));
    }
    let (qu, _) = orthonormal_range(u, 0.0)?;
    let (qw, _) = orthonormal_range(w, 0.0)?;
    let prod = qu.transpose() * &qw;
    let mut cosines: Vec<f64> = prod
        .singular_values()
        .iter()
        .map(|&c| c.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    cosines.truncate(qu.ncols().min(qw.ncols()));
    Ok(AngleReport {
        cosines,
        dim_u: qu.ncols(),
        dim_w: qw.ncols(),
    })
}

/// Angles between `range(v_r)` and `range(A(p)^{-1} B)` (real and imaginary parts)
/// along an optimization trajectory.
pub fn subspace_gap_trace(
    v_r: &DMatrix<f64>,
    model: &FullModel,
    trajectory: &[PalsParams],
    omega: f64,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<Vec<AngleReport>> {
    if v_r.nrows() != model.sys.n {
        return Err(Error::config(format!(
            "basis has {} rows, model has {} unknowns",
            v_r.nrows(),
            model.sys.n
        )));
    }
    let b = model.b_complex();
    trajectory
        .iter()
        .map(|p| {
            model.check(p)?;
            let op = model.sys.shifted_operator(omega, &model.p_diag(p));
            let x = Factorization::new(&op, solver)?.solve(&b, ledger)?;
            canonical_angles(v_r, &realify_block(&x))
        })
        .collect()
}

/// Diagonal of `A1 * mu` for an absorption change `delta_mu` at the listed grid nodes.
pub fn pixel_perturbation(model_sys: &crate::forward::SystemMatrices, pixels: &[(usize, f64)]) -> Result<Vec<f64>> {
    let n_nodes = model_sys.node_of_state.len();
    let mut field = vec![0.0; n_nodes];
    for &(node, dmu) in pixels {
        if node >= n_nodes {
            return Err(Error::config(format!("pixel {node} outside the grid")));
        }
        field[node] += dmu;
    }
    Ok(model_sys.a1_diag(&field))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmwReport {
    /// Number of perturbed unknowns in each of the two configurations.
    pub k_i: usize,
    pub k_i1: usize,
    /// `|V(i+1) - V(i)|_F / |V(0)|_F`.
    pub delta_v_rel: f64,
    /// Relative residual of the least-squares projection of the change onto
    /// `range(A~(0)^{-1} [U(i) U(i+1)])`; `None` when `k` exceeds the cap.
    pub containment_residual: Option<f64>,
    /// Right-hand side of the Frobenius-norm perturbation bound; `None` when `k` exceeds the cap.
    pub bound: Option<f64>,
    pub exceeds_k_max: bool,
}

/// Support of a state-order diagonal perturbation, as `(interior index, value)`.
fn interior_support(schur: &SchurSystem, n_face: usize, d: &[f64]) -> Result<Vec<(usize, f64)>> {
    if d.len() != n_face + schur.n_int {
        return Err(Error::config(format!(
            "perturbation has length {}, expected {}",
            d.len(),
            n_face + schur.n_int
        )));
    }
    if d[..n_face].iter().any(|&v| v != 0.0) {
        return Err(Error::config("perturbation touches eliminated boundary unknowns"));
    }
    Ok(d[n_face..]
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (i, v))
        .collect())
}

fn solve_real(
    schur: &SchurSystem,
    n_face: usize,
    d: &[f64],
    rhs: &DMatrix<f64>,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<DMatrix<f64>> {
    if rhs.ncols() == 0 {
        return Ok(DMatrix::zeros(schur.n_int, 0));
    }
    let mut full = vec![0.0; n_face + schur.n_int];
    full[n_face..].copy_from_slice(&d[n_face..]);
    let op = schur.shifted(0.0, &full);
    let x = Factorization::new(&op, solver)?.solve(&to_complex(rhs), ledger)?;
    Ok(real_part(&x))
}

fn unit_columns(n: usize, support: &[(usize, f64)]) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n, support.len());
    for (c, &(i, _)) in support.iter().enumerate() {
        u[(i, c)] = 1.0;
    }
    u
}

/// One term `|A0^{-1} U|_F |(I + Xi U^T A0^{-1} U)^{-1}|_F |Xi U^T|_F` of the bound.
fn bound_term(a0_inv_u: &DMatrix<f64>, support: &[(usize, f64)]) -> Result<f64> {
    let k = support.len();
    if k == 0 {
        return Ok(0.0);
    }
    let mut cap = DMatrix::<f64>::identity(k, k);
    for (r, &(_, xi)) in support.iter().enumerate() {
        for (c, &(j, _)) in support.iter().enumerate() {
            cap[(r, c)] += xi * a0_inv_u[(j, c)];
        }
    }
    let inv = cap
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("capacitance matrix is singular".into()))?;
    let xi_norm = libm::sqrt(support.iter().map(|&(_, x)| x * x).sum());
    Ok(a0_inv_u.norm() * inv.norm() * xi_norm)
}

/// Compares the candidate bases for two diagonal perturbations `d_i`, `d_i1`
/// (state order, as returned by [`pixel_perturbation`]) of the zero-frequency system.
pub fn smw_update_check(
    sys: &crate::forward::SystemMatrices,
    d_i: &[f64],
    d_i1: &[f64],
    k_max: usize,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<SmwReport> {
    let schur = schur_reduce(sys)?;
    let nf = sys.n_face;
    let s_i = interior_support(&schur, nf, d_i)?;
    let s_i1 = interior_support(&schur, nf, d_i1)?;
    let zero = vec![0.0; sys.n];
    let b = schur.b_dense();
    let v0 = solve_real(&schur, nf, &zero, &b, solver, ledger)?;
    let vi = solve_real(&schur, nf, d_i, &b, solver, ledger)?;
    let vi1 = solve_real(&schur, nf, d_i1, &b, solver, ledger)?;
    let dv = &vi1 - &vi;
    let delta_v_rel = dv.norm() / v0.norm();
    let exceeds_k_max = s_i.len() > k_max || s_i1.len() > k_max;
    let (containment_residual, bound) = if exceeds_k_max {
        (None, None)
    } else {
        let ui = unit_columns(schur.n_int, &s_i);
        let ui1 = unit_columns(schur.n_int, &s_i1);
        let yi = solve_real(&schur, nf, &zero, &ui, solver, ledger)?;
        let yi1 = solve_real(&schur, nf, &zero, &ui1, solver, ledger)?;
        let bound = bound_term(&yi, &s_i)? + bound_term(&yi1, &s_i1)?;
        let dv_norm = dv.norm();
        let residual = if dv_norm == 0.0 {
            0.0
        } else {
            let span = crate::linalg::hcat(&[&yi, &yi1], schur.n_int);
            let (q, _) = orthonormal_range(&span, 0.0)?;
            let proj = &q * (q.transpose() * &dv);
            (&dv - proj).norm() / dv_norm
        };
        (Some(residual), Some(bound))
    };
    Ok(SmwReport {
        k_i: s_i.len(),
        k_i1: s_i1.len(),
        delta_v_rel,
        containment_residual,
        bound,
        exceeds_k_max,
    })
}

/// A horizontal segment of absorption change, one node thick, in 2D `(x1, depth)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineAnomaly {
    pub x_start: f64,
    pub x_end: f64,
    pub depth: f64,
    pub delta_mu: f64,
}

impl LineAnomaly {
    /// Grid nodes covered by the segment.
    pub fn pixels(&self, grid: &Grid) -> Vec<(usize, f64)> {
        if self.delta_mu == 0.0 {
            return Vec::new();
        }
        let h = grid.h();
        let iz = libm::round(self.depth / h) as usize;
        (1..grid.nx() - 1)
            .filter(|&ix| {
                let x = grid.point(grid.node(ix, 0, 0))[0];
                x >= self.x_start - 1e-12 && x <= self.x_end + 1e-12
            })
            .map(|ix| (grid.node(ix, 0, iz), self.delta_mu))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendPoint {
    pub nodes: usize,
    pub h: f64,
    pub ratio: f64,
    /// Matching perturbation bound for the change from the background.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub points: Vec<TrendPoint>,
    /// Least-squares slope of `log(ratio)` against `log(h)`.
    pub slope: f64,
}

/// Sources and detectors at the same physical positions `x1 = -1 + k/4` on every grid.
fn quarter_layout(grid: &Grid) -> Result<SourceDetectorLayout> {
    let h = grid.h();
    let cols: Vec<usize> = (1..8)
        .map(|k| libm::round((k as f64 * 0.25) / h) as usize)
        .collect();
    if libm::fabs(cols[0] as f64 * h - 0.25) > 1e-12 {
        return Err(Error::config("grid does not place nodes at quarter positions"));
    }
    let bottom = grid.nz() - 1;
    Ok(SourceDetectorLayout {
        source_nodes: cols.iter().map(|&ix| grid.node(ix, 0, 0)).collect(),
        detector_nodes: cols.iter().map(|&ix| grid.node(ix, 0, bottom)).collect(),
    })
}

/// Relative change of the zero-frequency candidate basis caused by a fixed line
/// anomaly on a sequence of 2D `n x n` grids.
pub fn lemma2_trend(
    grid_nodes: &[usize],
    anomaly: &LineAnomaly,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<TrendReport> {
    if grid_nodes.is_empty() {
        return Err(Error::config("need at least one grid"));
    }
    let medium = MediumParams::default();
    let mut points = Vec::with_capacity(grid_nodes.len());
    for &n in grid_nodes {
        let grid = Grid::cube(2, n)?;
        let layout = quarter_layout(&grid)?;
        let sys = assemble_system(&grid, &medium, &layout, &medium.background_field(&grid))?;
        let zero = vec![0.0; sys.n];
        let d = pixel_perturbation(&sys, &anomaly.pixels(&grid))?;
        let rep = smw_update_check(&sys, &zero, &d, usize::MAX, solver, ledger)?;
        points.push(TrendPoint {
            nodes: n,
            h: grid.h(),
            ratio: rep.delta_v_rel,
            bound: rep.bound.unwrap_or(f64::NAN),
        });
    }
    Ok(TrendReport {
        slope: log_slope(&points),
        points,
    })
}

fn log_slope(points: &[TrendPoint]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.ratio > 0.0)
        .map(|p| (libm::log(p.h), libm::log(p.ratio)))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Five-point Dirichlet Laplacian (scaled by `h^2`) on the `(K-1) x (K-1)`
/// interior of the unit square, `i_x` fastest.
pub fn dirichlet_laplacian(k: usize) -> CsrMatrix {
    let m = k - 1;
    let idx = |ix: usize, iy: usize| iy * m + ix;
    let mut trip = Vec::with_capacity(5 * m * m);
    for iy in 0..m {
        for ix in 0..m {
            let i = idx(ix, iy);
            trip.push((i, i, 4.0));
            if ix > 0 {
                trip.push((i, idx(ix - 1, iy), -1.0));
            }
            if ix + 1 < m {
                trip.push((i, idx(ix + 1, iy), -1.0));
            }
            if iy > 0 {
                trip.push((i, idx(ix, iy - 1), -1.0));
            }
            if iy + 1 < m {
                trip.push((i, idx(ix, iy + 1), -1.0));
            }
        }
    }
    CsrMatrix::from_triplets(m * m, m * m, &trip)
}

pub fn laplacian_eigenvalue(k: usize, kx: usize, ky: usize) -> f64 {
    let h = 1.0 / k as f64;
    let pi = core::f64::consts::PI;
    // 4 sin^2(t / 2) = 2 - 2 cos t, which is exact at t = pi / 2
    4.0 - 2.0 * libm::cos(kx as f64 * pi * h) - 2.0 * libm::cos(ky as f64 * pi * h)
}

/// Eigenvector `2h sin(i_x k_x pi h) sin(i_y k_y pi h)` in the ordering of [`dirichlet_laplacian`].
pub fn laplacian_eigenvector(k: usize, kx: usize, ky: usize) -> Vec<f64> {
    let h = 1.0 / k as f64;
    let pi = core::f64::consts::PI;
    let mut v = Vec::with_capacity((k - 1) * (k - 1));
    for iy in 1..k {
        for ix in 1..k {
            v.push(
                2.0 * h
                    * libm::sin(ix as f64 * kx as f64 * pi * h)
                    * libm::sin(iy as f64 * ky as f64 * pi * h),
            );
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigpairRow {
    pub kx: usize,
    pub ky: usize,
    pub lambda: f64,
    /// `|A phi - lambda phi|_2`.
    pub residual: f64,
    pub norm: f64,
}

/// Checks every wave-number pair `1 <= k_x, k_y <= K - 1`.
pub fn laplacian_eigpair_check(k: usize) -> Result<Vec<EigpairRow>> {
    if k < 2 {
        return Err(Error::config(format!("need K >= 2, got {k}")));
    }
    let a = dirichlet_laplacian(k);
    let mut rows = Vec::with_capacity((k - 1) * (k - 1));
    for ky in 1..k {
        for kx in 1..k {
            let phi = laplacian_eigenvector(k, kx, ky);
            let lambda = laplacian_eigenvalue(k, kx, ky);
            let mut ap = vec![0.0; phi.len()];
            a.mul_vec(&phi, &mut ap);
            let residual = libm::sqrt(
                ap.iter()
                    .zip(&phi)
                    .map(|(x, p)| (x - lambda * p) * (x - lambda * p))
                    .sum(),
            );
            let norm = libm::sqrt(phi.iter().map(|x| x * x).sum());
            rows.push(EigpairRow {
                kx,
                ky,
                lambda,
                residual,
                norm,
            });
        }
    }
    Ok(rows)
}

/// Large solves of a full candidate build: one per source and detector column.
pub fn full_build_solves(n_k: usize, n_omega: usize, n_s: usize, n_d: usize) -> u64 {
    (n_k * n_omega * (n_s + n_d)) as u64
}

/// Large solves of a sketched candidate build.
pub fn randomized_build_solves(n_k: usize, n_omega: usize, l_s: usize, l_d: usize) -> u64 {
    (n_k * n_omega * (l_s + l_d)) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCounts {
    pub method: String,
    pub large: u64,
    pub small: u64,
    pub r: Option<usize>,
    /// Closed-form build count this run must reproduce, if any.
    pub expected_large: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveCountRow {
    pub method: String,
    pub large: u64,
    pub small: u64,
    pub r: Option<usize>,
}

/// Table rows for the executed runs; fails when a run's large-solve count
/// differs from its closed form.
pub fn solve_count_report(runs: &[RunCounts]) -> Result<Vec<SolveCountRow>> {
    runs.iter()
        .map(|run| {
            if let Some(expected) = run.expected_large {
                if expected != run.large {
                    return Err(Error::LedgerMismatch {
                        what: run.method.clone(),
                        expected,
                        found: run.large,
                    });
                }
            }
            Ok(SolveCountRow {
                method: run.method.clone(),
                large: run.large,
                small: run.small,
                r: run.r,
            })
        })
        .collect()
}
