//! Full-order evaluation: transfer function, measurement matrix, objective,
//! costate Jacobian and the elimination of the algebraic boundary unknowns.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::{Grid, ShiftedSystem, SystemMatrices};
use crate::linalg::to_complex;
use crate::pals::{absorption_field, absorption_gradient, PalsConfig, PalsParams};
use crate::solver::{Factorization, SolveConfig, SolveLedger};
use crate::sparse::{CsrMatrix, SparseVec};

/// A discretized system together with the map from PaLS parameters to its
/// parametric diagonal.
#[derive(Debug, Clone)]
pub struct FullModel {
    pub grid: Grid,
    pub sys: SystemMatrices,
    pub pals: PalsConfig,
}

impl FullModel {
    pub fn new(grid: Grid, sys: SystemMatrices, pals: PalsConfig) -> Result<Self> {
        pals.validate()?;
        if grid.n_nodes() != sys.n {
            return Err(Error::config("grid and system sizes differ"));
        }
        Ok(FullModel { grid, sys, pals })
    }

    pub fn n_sources(&self) -> usize {
        self.sys.n_sources()
    }

    pub fn n_detectors(&self) -> usize {
        self.sys.n_detectors()
    }

    /// Diagonal of `A1(p)` in state order.
    pub fn p_diag(&self, p: &PalsParams) -> Vec<f64> {
        self.sys.a1_diag(&absorption_field(&self.grid, p, &self.pals))
    }

    /// Diagonals of `dA/dp_k` in state order.
    pub fn dp_diags(&self, p: &PalsParams) -> Vec<SparseVec> {
        absorption_gradient(&self.grid, p, &self.pals)
            .into_iter()
            .map(|g| {
                let mut out = SparseVec::default();
                for (&node, &v) in g.indices.iter().zip(&g.values) {
                    let s = self.sys.state_of_node[node];
                    let scale = self.sys.a1_scale[s];
                    if scale != 0.0 {
                        out.indices.push(s);
                        out.values.push(scale * v);
                    }
                }
                out
            })
            .collect()
    }

    pub fn b_complex(&self) -> DMatrix<Complex64> {
        to_complex(&self.sys.b_dense())
    }

    pub fn ct_complex(&self) -> DMatrix<Complex64> {
        to_complex(&self.sys.c_dense().transpose())
    }

    pub(crate) fn check(&self, p: &PalsParams) -> Result<()> {
        if p.dim() != self.grid.dim() {
            return Err(Error::config("parameter dimension differs from the grid"));
        }
        if !p.is_admissible() {
            return Err(Error::config("parameters are not admissible"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSample {
    pub omega: f64,
    pub psi: DMatrix<Complex64>,
}

/// `n_d x (n_s n_omega)` matrix of predicted data, sources fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    pub m: DMatrix<Complex64>,
    pub n_sources: usize,
    pub n_omega: usize,
}

impl MeasurementMatrix {
    pub fn from_blocks(blocks: &[DMatrix<Complex64>]) -> Self {
        let n_s = blocks.first().map_or(0, |b| b.ncols());
        let n_d = blocks.first().map_or(0, |b| b.nrows());
        let mut m = DMatrix::zeros(n_d, n_s * blocks.len());
        for (j, b) in blocks.iter().enumerate() {
            m.columns_mut(j * n_s, n_s).copy_from(b);
        }
        MeasurementMatrix {
            m,
            n_sources: n_s,
            n_omega: blocks.len(),
        }
    }

    pub fn block(&self, j: usize) -> DMatrix<Complex64> {
        self.m.columns(j * self.n_sources, self.n_sources).into_owned()
    }
}

/// `C M^{-1} B` for an explicit operator; records `B.ncols()` solves.
pub fn transfer_with(
    op: &ShiftedSystem<'_>,
    b: &DMatrix<Complex64>,
    c: &DMatrix<Complex64>,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<DMatrix<Complex64>> {
    let x = Factorization::new(op, solver)?.solve(b, ledger)?;
    Ok(c * x)
}

pub fn transfer_function(
    model: &FullModel,
    omega: f64,
    p: &PalsParams,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<TransferSample> {
    model.check(p)?;
    let pd = model.p_diag(p);
    let op = model.sys.shifted_operator(omega, &pd);
    let x = Factorization::new(&op, solver)?.solve(&model.b_complex(), ledger)?;
    Ok(TransferSample {
        omega,
        psi: model.sys.observe(&x),
    })
}

/// State solutions `X_j = (i omega_j / nu E + A(p))^{-1} B` for every frequency.
pub fn forward_states(
    model: &FullModel,
    omegas: &[f64],
    p: &PalsParams,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<Vec<DMatrix<Complex64>>> {
    model.check(p)?;
    let pd = model.p_diag(p);
    let b = model.b_complex();
    omegas
        .iter()
        .map(|&w| {
            let op = model.sys.shifted_operator(w, &pd);
            Factorization::new(&op, solver)?.solve(&b, ledger)
        })
        .collect()
}

pub fn measurement_matrix(
    model: &FullModel,
    omegas: &[f64],
    p: &PalsParams,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<MeasurementMatrix> {
    let states = forward_states(model, omegas, p, solver, ledger)?;
    let blocks: Vec<_> = states.iter().map(|x| model.sys.observe(x)).collect();
    Ok(MeasurementMatrix::from_blocks(&blocks))
}

/// `|M - D|_F^2` over real and imaginary parts.
pub fn objective(m_pred: &DMatrix<Complex64>, data: &DMatrix<Complex64>) -> f64 {
    assert_eq!(m_pred.shape(), data.shape(), "prediction and data shapes differ");
    m_pred.iter().zip(data.iter()).map(|(a, b)| (a - b).norm_sqr()).sum()
}

/// Jacobian blocks `J[j][k] = d Psi(omega_j; p) / d p_k`, each `n_d x n_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub blocks: Vec<Vec<DMatrix<Complex64>>>,
}

impl Jacobian {
    pub fn n_params(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    pub fn n_omega(&self) -> usize {
        self.blocks.len()
    }

    /// Real matrix whose column `k` stacks `Re vec(dM/dp_k)` over `Im vec(dM/dp_k)`,
    /// with `vec` running down the columns of the measurement matrix.
    pub fn matricize(&self) -> DMatrix<f64> {
        let np = self.n_params();
        let per: usize = self.blocks.iter().map(|b| b.first().map_or(0, |m| m.len())).sum();
        let mut out = DMatrix::zeros(2 * per, np);
        for k in 0..np {
            let mut row = 0;
            for blk in &self.blocks {
                for z in blk[k].iter() {
                    out[(row, k)] = z.re;
                    out[(row + per, k)] = z.im;
                    row += 1;
                }
            }
        }
        out
    }
}

/// Real residual vector matching [`Jacobian::matricize`]: `[Re vec(M - D); Im vec(M - D)]`.
pub fn stacked_residual(m_pred: &DMatrix<Complex64>, data: &DMatrix<Complex64>) -> Vec<f64> {
    let d = m_pred - data;
    let mut out: Vec<f64> = d.iter().map(|z| z.re).collect();
    out.extend(d.iter().map(|z| z.im));
    out
}

/// `-Z^T diag(v) Y` restricted to the support of `v`.
pub(crate) fn costate_product(z: &DMatrix<Complex64>, v: &SparseVec, y: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut out = DMatrix::zeros(z.ncols(), y.ncols());
    for (&i, &w) in v.indices.iter().zip(&v.values) {
        if w == 0.0 {
            continue;
        }
        for s in 0..y.ncols() {
            let ys = y[(i, s)] * w;
            if ys == Complex64::default() {
                continue;
            }
            for d in 0..z.ncols() {
                out[(d, s)] -= z[(i, d)] * ys;
            }
        }
    }
    out
}

/// Jacobian from already computed state solutions: only the adjoint solves
/// `(i omega_j / nu E + A(p))^T Z_j = C^T` are performed.
pub fn jacobian_from_states(
    model: &FullModel,
    omegas: &[f64],
    p: &PalsParams,
    states: &[DMatrix<Complex64>],
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<Jacobian> {
    model.check(p)?;
    if states.len() != omegas.len() {
        return Err(Error::config("one state block per frequency is required"));
    }
    let pd = model.p_diag(p);
    let dps = model.dp_diags(p);
    let ct = model.ct_complex();
    let mut blocks = Vec::with_capacity(omegas.len());
    for (&w, x) in omegas.iter().zip(states) {
        let op = model.sys.shifted_operator(w, &pd);
        let z = Factorization::new(&op, solver)?.solve_transpose(&ct, ledger)?;
        blocks.push(dps.iter().map(|v| costate_product(&z, v, x)).collect());
    }
    Ok(Jacobian { blocks })
}

/// Costate Jacobian computed from scratch: `n_omega (n_s + n_d)` large solves.
pub fn jacobian(
    model: &FullModel,
    omegas: &[f64],
    p: &PalsParams,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<Jacobian> {
    model.check(p)?;
    let pd = model.p_diag(p);
    let dps = model.dp_diags(p);
    let b = model.b_complex();
    let ct = model.ct_complex();
    let mut blocks = Vec::with_capacity(omegas.len());
    for &w in omegas {
        let op = model.sys.shifted_operator(w, &pd);
        let f = Factorization::new(&op, solver)?;
        let x = f.solve(&b, ledger)?;
        let z = f.solve_transpose(&ct, ledger)?;
        blocks.push(dps.iter().map(|v| costate_product(&z, v, &x)).collect());
    }
    Ok(Jacobian { blocks })
}

/// Frequency derivative `-C K^{-1} (i E / nu) K^{-1} B`, `K = i omega / nu E + A(p)`.
pub fn transfer_derivative_omega(
    model: &FullModel,
    omega: f64,
    p: &PalsParams,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<DMatrix<Complex64>> {
    model.check(p)?;
    let pd = model.p_diag(p);
    let op = model.sys.shifted_operator(omega, &pd);
    let f = Factorization::new(&op, solver)?;
    let x = f.solve(&model.b_complex(), ledger)?;
    let scale = Complex64::new(0.0, 1.0 / model.sys.light_speed);
    let ex = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * scale * model.sys.e_diag[i]);
    let y = f.solve(&ex, ledger)?;
    Ok(-model.sys.observe(&y))
}

/// The system after eliminating the Robin-face unknowns:
/// `Psi(omega) = C~ (i omega / nu I + A~(p))^{-1} B~`.
#[derive(Debug, Clone)]
pub struct SchurSystem {
    pub n_int: usize,
    /// `A~(0) = F(0) - D2 G^{-1} D1`.
    pub a_tilde0: CsrMatrix,
    a_off: CsrMatrix,
    a_diag: Vec<f64>,
    /// `B~ = B1`, `n_int x n_s`.
    pub b_tilde: CsrMatrix,
    /// `C~ = -C1 G^{-1} D1`, `n_d x n_int`.
    pub c_tilde: CsrMatrix,
    n_face: usize,
    light_speed: f64,
}

pub fn schur_reduce(sys: &SystemMatrices) -> Result<SchurSystem> {
    let nf = sys.n_face;
    let n = sys.n;
    let a0 = &sys.a0;
    let mut g = vec![0.0; nf];
    for (f, gf) in g.iter_mut().enumerate() {
        let (cols, vals) = a0.row(f);
        for (&c, &v) in cols.iter().zip(vals) {
            if c == f {
                *gf = v;
            } else if c < nf {
                return Err(Error::Structure(format!("boundary block is not diagonal at row {f}")));
            }
        }
        if *gf == 0.0 {
            return Err(Error::Structure(format!("boundary block is singular at row {f}")));
        }
    }
    let n_int = n - nf;
    let mut trip = Vec::new();
    for i in nf..n {
        let (cols, vals) = a0.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            if c >= nf {
                trip.push((i - nf, c - nf, v));
            } else {
                let (cf, vf) = a0.row(c);
                for (&cc, &vv) in cf.iter().zip(vf) {
                    if cc >= nf {
                        trip.push((i - nf, cc - nf, -v * vv / g[c]));
                    }
                }
            }
        }
    }
    let a_tilde0 = CsrMatrix::from_triplets(n_int, n_int, &trip);

    let mut bt = Vec::new();
    for (k, &(s, v)) in sys.sources.iter().enumerate() {
        if s < nf {
            return Err(Error::Structure(format!("source {k} acts on an eliminated unknown")));
        }
        bt.push((s - nf, k, v));
    }
    let b_tilde = CsrMatrix::from_triplets(n_int, sys.n_sources(), &bt);

    let mut ct = Vec::new();
    for (k, &s) in sys.detectors.iter().enumerate() {
        if s >= nf {
            return Err(Error::Structure(format!("detector {k} reads a retained unknown")));
        }
        let (cols, vals) = a0.row(s);
        for (&c, &v) in cols.iter().zip(vals) {
            if c >= nf {
                ct.push((k, c - nf, -v / g[s]));
            }
        }
    }
    let c_tilde = CsrMatrix::from_triplets(sys.n_detectors(), n_int, &ct);

    Ok(SchurSystem {
        n_int,
        a_off: a_tilde0.without_diagonal(),
        a_diag: a_tilde0.diagonal(),
        a_tilde0,
        b_tilde,
        c_tilde,
        n_face: nf,
        light_speed: sys.light_speed,
    })
}

impl SchurSystem {
    /// `i omega / nu I + A~(p)` for a full-state parametric diagonal.
    pub fn shifted(&self, omega: f64, p_diag: &[f64]) -> ShiftedSystem<'_> {
        let shift = omega / self.light_speed;
        let diag = (0..self.n_int)
            .map(|i| Complex64::new(self.a_diag[i] + p_diag[self.n_face + i], shift))
            .collect();
        ShiftedSystem::from_parts(&self.a_off, diag, 0).expect("consistent by construction")
    }

    /// Dense `A~(p)`.
    pub fn a_tilde_dense(&self, p_diag: &[f64]) -> DMatrix<f64> {
        let mut m = self.a_tilde0.to_dense();
        for i in 0..self.n_int {
            m[(i, i)] += p_diag[self.n_face + i];
        }
        m
    }

    pub fn b_dense(&self) -> DMatrix<f64> {
        self.b_tilde.to_dense()
    }

    pub fn c_dense(&self) -> DMatrix<f64> {
        self.c_tilde.to_dense()
    }

    pub fn transfer(
        &self,
        omega: f64,
        p_diag: &[f64],
        solver: &SolveConfig,
        ledger: &mut SolveLedger,
    ) -> Result<DMatrix<Complex64>> {
        let op = self.shifted(omega, p_diag);
        transfer_with(&op, &to_complex(&self.b_dense()), &to_complex(&self.c_dense()), solver, ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{assemble_system, MediumParams, SourceDetectorLayout};
    use crate::linalg::rel_diff_c;

    fn model(n: usize, ns: usize) -> FullModel {
        let grid = Grid::cube(2, n).unwrap();
        let layout = SourceDetectorLayout::regular(&grid, ns, ns).unwrap();
        let medium = MediumParams::default();
        let mu = medium.background_field(&grid);
        let sys = assemble_system(&grid, &medium, &layout, &mu).unwrap();
        FullModel::new(grid, sys, PalsConfig::default()).unwrap()
    }

    fn params() -> PalsParams {
        PalsParams::from_bumps(2, &[(0.6, 2.0, [0.1, 0.9, 0.0]), (-0.3, 2.5, [-0.3, 1.2, 0.0])]).unwrap()
    }

    #[test]
    fn three_node_toy_matches_hand_inverse() {
        // M = [[2, -1, 0], [-1, 2, -1], [0, -1, 2]], B = e1, C = e3^T: (M^{-1})_{31} = 1/4
        let off = CsrMatrix::from_triplets(3, 3, &[(0, 1, -1.0), (1, 0, -1.0), (1, 2, -1.0), (2, 1, -1.0)]);
        let op = ShiftedSystem::from_parts(&off, vec![Complex64::new(2.0, 0.0); 3], 0).unwrap();
        let mut b = DMatrix::zeros(3, 1);
        b[(0, 0)] = Complex64::new(1.0, 0.0);
        let mut c = DMatrix::zeros(1, 3);
        c[(0, 2)] = Complex64::new(1.0, 0.0);
        let psi = transfer_with(&op, &b, &c, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        assert!((psi[(0, 0)] - Complex64::new(0.25, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_frequency_transfer_is_real() {
        let m = model(11, 3);
        let mut l = SolveLedger::default();
        let t = transfer_function(&m, 0.0, &params(), &SolveConfig::basis(), &mut l).unwrap();
        assert!(t.psi.iter().all(|z| z.im == 0.0));
        assert_eq!(l.large_solves, 3);
    }

    #[test]
    fn reciprocity_with_matching_source_and_detector() {
        let m = model(11, 3);
        let pd = m.p_diag(&params());
        let op = m.sys.shifted_operator(0.8, &pd);
        let b = m.b_complex();
        let psi = transfer_with(&op, &b, &b.transpose(), &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        assert!((&psi - psi.transpose()).norm() <= 1e-12 * psi.norm());
    }

    #[test]
    fn measurement_matrix_layout_and_count() {
        let m = model(11, 3);
        let mut l = SolveLedger::default();
        let omegas = [0.0, 0.5];
        let mm = measurement_matrix(&m, &omegas, &params(), &SolveConfig::basis(), &mut l).unwrap();
        assert_eq!(mm.m.shape(), (3, 6));
        assert_eq!(l.large_solves, 6);
        let t = transfer_function(&m, 0.5, &params(), &SolveConfig::basis(), &mut l).unwrap();
        assert!(rel_diff_c(&mm.block(1), &t.psi) < 1e-14);
    }

    #[test]
    fn objective_cases() {
        let a = DMatrix::from_fn(2, 3, |i, j| Complex64::new(i as f64 - 0.5, j as f64 * 0.3));
        let b = DMatrix::from_fn(2, 3, |i, j| Complex64::new((i * j) as f64, -1.0));
        assert_eq!(objective(&a, &a), 0.0);
        let z = DMatrix::zeros(2, 3);
        assert!((objective(&a, &z) - a.norm_squared()).abs() < 1e-14);
        let mut direct = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                let d = a[(i, j)] - b[(i, j)];
                direct += d.re * d.re + d.im * d.im;
            }
        }
        assert!((objective(&a, &b) - direct).abs() < 1e-14);
    }

    #[test]
    fn parameter_outside_supports_has_zero_jacobian() {
        let m = model(11, 3);
        // a second bump placed far outside the domain contributes nothing
        let p = PalsParams::from_bumps(2, &[(0.6, 2.0, [0.1, 0.9, 0.0]), (0.5, 5.0, [5.0, 5.0, 0.0])]).unwrap();
        let j = jacobian(&m, &[0.0], &p, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        for k in 4..8 {
            assert_eq!(j.blocks[0][k].norm(), 0.0);
        }
        assert!(j.blocks[0][0].norm() > 0.0);
    }

    #[test]
    fn jacobian_ledger_and_reuse() {
        let m = model(11, 3);
        let omegas = [0.0, 1.0];
        let p = params();
        let mut fresh = SolveLedger::default();
        let j1 = jacobian(&m, &omegas, &p, &SolveConfig::basis(), &mut fresh).unwrap();
        assert_eq!(fresh.large_solves, 2 * (3 + 3));
        let mut l = SolveLedger::default();
        let states = forward_states(&m, &omegas, &p, &SolveConfig::basis(), &mut l).unwrap();
        let j2 = jacobian_from_states(&m, &omegas, &p, &states, &SolveConfig::basis(), &mut l).unwrap();
        assert_eq!(l.large_solves, 12);
        for (a, b) in j1.blocks.iter().flatten().zip(j2.blocks.iter().flatten()) {
            assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn schur_transfer_equals_full_transfer() {
        let m = model(17, 4);
        let sc = schur_reduce(&m.sys).unwrap();
        let p = params();
        let pd = m.p_diag(&p);
        for w in [0.0, 1.0] {
            let full = transfer_function(&m, w, &p, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
            let red = sc.transfer(w, &pd, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
            assert!(rel_diff_c(&red, &full.psi) <= 1e-10);
        }
    }

    #[test]
    fn schur_operator_is_symmetric_positive_definite() {
        let m = model(9, 2);
        let sc = schur_reduce(&m.sys).unwrap();
        assert!(sc.a_tilde0.is_symmetric(1e-15));
        let dense = sc.a_tilde_dense(&vec![0.0; m.sys.n]);
        assert!(dense.clone().cholesky().is_some());
    }

    #[test]
    fn schur_rejects_non_diagonal_boundary_block() {
        let mut m = model(7, 2);
        let mut t = Vec::new();
        for i in 0..m.sys.n {
            let (c, v) = m.sys.a0.row(i);
            for (&c, &v) in c.iter().zip(v) {
                t.push((i, c, v));
            }
        }
        t.push((0, 1, -0.1));
        m.sys.a0 = CsrMatrix::from_triplets(m.sys.n, m.sys.n, &t);
        assert!(matches!(schur_reduce(&m.sys), Err(Error::Structure(_))));
    }

    #[test]
    fn omega_derivative_matches_central_difference() {
        let m = model(11, 2);
        let p = params();
        let w = 0.7;
        let d = transfer_derivative_omega(&m, w, &p, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        let h = 1e-5;
        let plus = transfer_function(&m, w + h, &p, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        let minus = transfer_function(&m, w - h, &p, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        let fd = (plus.psi - minus.psi) / Complex64::new(2.0 * h, 0.0);
        assert!(rel_diff_c(&d, &fd) < 1e-6);
    }

    #[test]
    fn matricize_orders_real_then_imaginary() {
        let blk = DMatrix::from_row_slice(2, 1, &[Complex64::new(1.0, 2.0), Complex64::new(3.0, 4.0)]);
        let j = Jacobian {
            blocks: vec![vec![blk.clone()], vec![blk * Complex64::new(2.0, 0.0)]],
        };
        let m = j.matricize();
        assert_eq!(m.as_slice(), &[1.0, 3.0, 2.0, 6.0, 2.0, 4.0, 4.0, 8.0]);
        let r = stacked_residual(&DMatrix::from_row_slice(1, 2, &[Complex64::new(1.0, 1.0), Complex64::new(2.0, 0.0)]), &DMatrix::zeros(1, 2));
        assert_eq!(r, vec![1.0, 2.0, 1.0, 0.0]);
    }
}
