//! Interpolatory reduced-order models.
//!
//! Candidate bases are solution bundles of the shifted systems at every pair of
//! parameter sample and frequency, either for all sources and detectors or for
//! random combinations of them. They are realified, truncated by an SVD, merged
//! into one orthonormal basis `V_r` and used for a one-sided projection
//! `E_r = V_r^T E V_r`, `A_r(p) = V_r^T A(p) V_r`, `B_r = V_r^T B`, `C_r = C V_r`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::Grid;
use crate::linalg::{hcat, imag_part, orthonormal_range, real_part, to_complex};
use crate::pals::{absorption_field, absorption_gradient, PalsConfig, PalsParams};
use crate::sketch::{draw_sketch, Side, SketchConfig};
use crate::solver::{Factorization, SolveConfig, SolveLedger};
use crate::sparse::SparseVec;
use crate::transfer::{costate_product, FullModel, Jacobian, MeasurementMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Full,
    Randomized,
}

/// Solutions at one `(sample, frequency)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBlock {
    pub sample: usize,
    pub freq: usize,
    pub omega: f64,
    /// `K^{-1} B` or `K^{-1} B S`.
    pub v: DMatrix<Complex64>,
    /// `K^{-T} C^T` or `K^{-T} C^T T`.
    pub w: DMatrix<Complex64>,
    pub source_sketch: Option<DMatrix<f64>>,
    pub detector_sketch: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBasis {
    pub blocks: Vec<CandidateBlock>,
    pub provenance: Provenance,
}

fn at_sample(i: usize, j: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtSample {
        point: i,
        freq: j,
        source: Box::new(e),
    }
}

/// One block of the full candidate basis; records `n_s + n_d` large solves.
pub fn candidate_block_full(
    model: &FullModel,
    p: &PalsParams,
    sample: usize,
    freq: usize,
    omega: f64,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<CandidateBlock> {
    let run = |ledger: &mut SolveLedger| -> Result<CandidateBlock> {
        model.check(p)?;
        let pd = model.p_diag(p);
        let op = model.sys.shifted_operator(omega, &pd);
        let f = Factorization::new(&op, solver)?;
        let v = f.solve(&model.b_complex(), ledger)?;
        let w = f.solve_transpose(&model.ct_complex(), ledger)?;
        Ok(CandidateBlock {
            sample,
            freq,
            omega,
            v,
            w,
            source_sketch: None,
            detector_sketch: None,
        })
    };
    run(ledger).map_err(at_sample(sample, freq))
}

/// One block of the randomized candidate basis; records `l_s + l_d` large solves.
#[allow(clippy::too_many_arguments)]
pub fn candidate_block_randomized(
    model: &FullModel,
    p: &PalsParams,
    sample: usize,
    freq: usize,
    omega: f64,
    sketch: &SketchConfig,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<CandidateBlock> {
    let run = |ledger: &mut SolveLedger| -> Result<CandidateBlock> {
        let (n_s, n_d) = (model.n_sources(), model.n_detectors());
        sketch.validate(n_s, n_d)?;
        let s = draw_sketch(n_s, sketch.l_s, sketch, sample, freq, Side::Source)?;
        let t = draw_sketch(n_d, sketch.l_d, sketch, sample, freq, Side::Detector)?;
        model.check(p)?;
        let pd = model.p_diag(p);
        let op = model.sys.shifted_operator(omega, &pd);
        let f = Factorization::new(&op, solver)?;
        let v = f.solve(&to_complex(&model.sys.sources_times(&s)), ledger)?;
        let w = f.solve_transpose(&to_complex(&model.sys.detectors_transpose_times(&t)), ledger)?;
        Ok(CandidateBlock {
            sample,
            freq,
            omega,
            v,
            w,
            source_sketch: Some(s),
            detector_sketch: Some(t),
        })
    };
    run(ledger).map_err(at_sample(sample, freq))
}

fn check_points(samples: &[PalsParams], omegas: &[f64]) -> Result<()> {
    if samples.is_empty() || omegas.is_empty() {
        return Err(Error::config("need at least one parameter sample and one frequency"));
    }
    Ok(())
}

pub fn build_candidate_full(
    model: &FullModel,
    samples: &[PalsParams],
    omegas: &[f64],
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<CandidateBasis> {
    check_points(samples, omegas)?;
    let mut blocks = Vec::with_capacity(samples.len() * omegas.len());
    for (i, p) in samples.iter().enumerate() {
        for (j, &w) in omegas.iter().enumerate() {
            blocks.push(candidate_block_full(model, p, i, j, w, solver, ledger)?);
        }
    }
    Ok(CandidateBasis {
        blocks,
        provenance: Provenance::Full,
    })
}

pub fn build_candidate_randomized(
    model: &FullModel,
    samples: &[PalsParams],
    omegas: &[f64],
    sketch: &SketchConfig,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<CandidateBasis> {
    check_points(samples, omegas)?;
    sketch.validate(model.n_sources(), model.n_detectors())?;
    let mut blocks = Vec::with_capacity(samples.len() * omegas.len());
    for (i, p) in samples.iter().enumerate() {
        for (j, &w) in omegas.iter().enumerate() {
            blocks.push(candidate_block_randomized(model, p, i, j, w, sketch, solver, ledger)?);
        }
    }
    Ok(CandidateBasis {
        blocks,
        provenance: Provenance::Randomized,
    })
}

/// `[Re X | Im X]`, or `Re X` when the imaginary part vanishes.
pub fn realify_block(x: &DMatrix<Complex64>) -> DMatrix<f64> {
    let re = real_part(x);
    if x.iter().all(|z| z.im == 0.0) {
        re
    } else {
        hcat(&[&re, &imag_part(x)], x.nrows())
    }
}

pub fn realify(candidate: &CandidateBasis) -> CandidateBasis {
    CandidateBasis {
        blocks: candidate
            .blocks
            .iter()
            .map(|b| CandidateBlock {
                v: to_complex(&realify_block(&b.v)),
                w: to_complex(&realify_block(&b.w)),
                ..b.clone()
            })
            .collect(),
        provenance: candidate.provenance,
    }
}

impl CandidateBasis {
    pub fn n(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.v.nrows())
    }

    /// Realified source-side blocks side by side.
    pub fn v_matrix(&self) -> DMatrix<f64> {
        let parts: Vec<_> = self.blocks.iter().map(|b| realify_block(&b.v)).collect();
        hcat(&parts.iter().collect::<Vec<_>>(), self.n())
    }

    /// Realified detector-side blocks side by side.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let parts: Vec<_> = self.blocks.iter().map(|b| realify_block(&b.w)).collect();
        hcat(&parts.iter().collect::<Vec<_>>(), self.n())
    }

    /// Both sides side by side.
    pub fn all_columns(&self) -> DMatrix<f64> {
        hcat(&[&self.v_matrix(), &self.w_matrix()], self.n())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReveal {
    pub q_v: DMatrix<f64>,
    pub q_w: DMatrix<f64>,
    pub sigma_v: Vec<f64>,
    pub sigma_w: Vec<f64>,
}

/// Orthonormal bases for the realified source and detector candidates, keeping
/// singular values `>= max(trunc_tol, floor) * sigma_max`.
pub fn rank_reveal(candidate: &CandidateBasis, trunc_tol: f64) -> Result<RankReveal> {
    if !(0.0..1.0).contains(&trunc_tol) {
        return Err(Error::config(format!("truncation tolerance must lie in [0, 1), got {trunc_tol}")));
    }
    if candidate.blocks.is_empty() {
        return Err(Error::Degenerate("candidate basis has no blocks".into()));
    }
    let (q_v, sigma_v) = orthonormal_range(&candidate.v_matrix(), trunc_tol)?;
    let (q_w, sigma_w) = orthonormal_range(&candidate.w_matrix(), trunc_tol)?;
    Ok(RankReveal {
        q_v,
        q_w,
        sigma_v,
        sigma_w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBasis {
    pub v_r: DMatrix<f64>,
    pub r: usize,
    pub trunc_tol: f64,
    /// Columns kept on each side before merging.
    pub r_v: usize,
    pub r_w: usize,
    pub sigma_v: Vec<f64>,
    pub sigma_w: Vec<f64>,
}

/// Orthonormal basis of `range([Q_V Q_W])`.
pub fn assemble_global(q_v: &DMatrix<f64>, q_w: &DMatrix<f64>) -> Result<GlobalBasis> {
    let n = q_v.nrows().max(q_w.nrows());
    let both = hcat(&[q_v, q_w], n);
    let (v_r, _) = orthonormal_range(&both, 0.0)?;
    Ok(GlobalBasis {
        r: v_r.ncols(),
        v_r,
        trunc_tol: 0.0,
        r_v: q_v.ncols(),
        r_w: q_w.ncols(),
        sigma_v: Vec::new(),
        sigma_w: Vec::new(),
    })
}

/// Realify, truncate and merge in one step.
pub fn global_basis(candidate: &CandidateBasis, trunc_tol: f64) -> Result<GlobalBasis> {
    let rr = rank_reveal(candidate, trunc_tol)?;
    let mut g = assemble_global(&rr.q_v, &rr.q_w)?;
    g.trunc_tol = trunc_tol;
    g.sigma_v = rr.sigma_v;
    g.sigma_w = rr.sigma_w;
    Ok(g)
}

/// Projected operators. `A_r(p) = A0_r + V_S^T diag(d_S(p)) V_S` where `S` are the
/// states carrying a parametric diagonal and `V_S` the corresponding rows of `V_r`.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub r: usize,
    pub e_r: DMatrix<f64>,
    pub a0_r: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
    pub c_r: DMatrix<f64>,
    v_support: DMatrix<f64>,
    support_scale: Vec<f64>,
    support_nodes: Vec<usize>,
    support_of_node: Vec<usize>,
    grid: Grid,
    pals: PalsConfig,
    light_speed: f64,
}

pub fn reduce_operators(model: &FullModel, v_r: &DMatrix<f64>) -> Result<ReducedModel> {
    let sys = &model.sys;
    let n = sys.n;
    if v_r.nrows() != n || v_r.ncols() == 0 {
        return Err(Error::config(format!("basis is {}x{} for state dimension {n}", v_r.nrows(), v_r.ncols())));
    }
    let r = v_r.ncols();
    let mut av = DMatrix::zeros(n, r);
    for i in 0..n {
        let (cols, vals) = sys.a0.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            for k in 0..r {
                av[(i, k)] += v * v_r[(c, k)];
            }
        }
    }
    let a0_r = v_r.transpose() * av;
    let mut ev = v_r.clone();
    for (i, &e) in sys.e_diag.iter().enumerate() {
        if e != 1.0 {
            ev.row_mut(i).scale_mut(e);
        }
    }
    let e_r = v_r.transpose() * ev;
    let b_r = v_r.transpose() * sys.b_dense();
    let c_r = DMatrix::from_fn(sys.n_detectors(), r, |d, k| v_r[(sys.detectors[d], k)]);

    let support: Vec<usize> = (0..n).filter(|&s| sys.a1_scale[s] != 0.0).collect();
    let v_support = DMatrix::from_fn(support.len(), r, |i, k| v_r[(support[i], k)]);
    let support_scale = support.iter().map(|&s| sys.a1_scale[s]).collect();
    let support_nodes: Vec<usize> = support.iter().map(|&s| sys.node_of_state[s]).collect();
    let mut support_of_node = vec![usize::MAX; n];
    for (k, &node) in support_nodes.iter().enumerate() {
        support_of_node[node] = k;
    }
    Ok(ReducedModel {
        r,
        e_r,
        a0_r,
        b_r,
        c_r,
        v_support,
        support_scale,
        support_nodes,
        support_of_node,
        grid: model.grid.clone(),
        pals: model.pals.clone(),
        light_speed: sys.light_speed,
    })
}

impl ReducedModel {
    pub fn n_sources(&self) -> usize {
        self.b_r.ncols()
    }

    pub fn n_detectors(&self) -> usize {
        self.c_r.nrows()
    }

    /// `A_r(p)`.
    pub fn operator(&self, p: &PalsParams) -> Result<DMatrix<f64>> {
        if !p.is_admissible() || p.dim() != self.grid.dim() {
            return Err(Error::config("parameters are not admissible for this model"));
        }
        let field = absorption_field(&self.grid, p, &self.pals);
        let mut scaled = self.v_support.clone();
        for (i, (&node, &s)) in self.support_nodes.iter().zip(&self.support_scale).enumerate() {
            scaled.row_mut(i).scale_mut(s * field[node]);
        }
        Ok(&self.a0_r + self.v_support.transpose() * scaled)
    }

    fn shifted(&self, omega: f64, a_r: &DMatrix<f64>) -> DMatrix<Complex64> {
        let shift = omega / self.light_speed;
        DMatrix::from_fn(self.r, self.r, |i, j| Complex64::new(a_r[(i, j)], shift * self.e_r[(i, j)]))
    }

    /// `d A_r / d p_k` restricted to support rows, in support indexing.
    fn support_gradients(&self, p: &PalsParams) -> Vec<SparseVec> {
        absorption_gradient(&self.grid, p, &self.pals)
            .into_iter()
            .map(|g| {
                let mut out = SparseVec::default();
                for (&node, &v) in g.indices.iter().zip(&g.values) {
                    let k = self.support_of_node[node];
                    if k != usize::MAX {
                        out.indices.push(k);
                        out.values.push(self.support_scale[k] * v);
                    }
                }
                out
            })
            .collect()
    }
}

fn reduced_lu(k: DMatrix<Complex64>, omega: f64) -> Result<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = k.lu();
    if !lu.is_invertible() {
        return Err(Error::ReducedSingular { omega });
    }
    Ok(lu)
}

fn checked_solve(
    lu: &nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    rhs: &DMatrix<Complex64>,
    omega: f64,
) -> Result<DMatrix<Complex64>> {
    let x = lu.solve(rhs).ok_or(Error::ReducedSingular { omega })?;
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::ReducedSingular { omega });
    }
    Ok(x)
}

/// `Psi_r = C_r (i omega / nu E_r + A_r(p))^{-1} B_r`; records `n_s` small solves.
pub fn rom_transfer(rm: &ReducedModel, omega: f64, p: &PalsParams, ledger: &mut SolveLedger) -> Result<DMatrix<Complex64>> {
    let a_r = rm.operator(p)?;
    let lu = reduced_lu(rm.shifted(omega, &a_r), omega)?;
    let x = checked_solve(&lu, &to_complex(&rm.b_r), omega)?;
    ledger.record_small(rm.n_sources());
    Ok(to_complex(&rm.c_r) * x)
}

/// Reduced measurement matrix over all frequencies; `n_s n_omega` small solves.
pub fn rom_measurement(
    rm: &ReducedModel,
    omegas: &[f64],
    p: &PalsParams,
    ledger: &mut SolveLedger,
) -> Result<MeasurementMatrix> {
    let a_r = rm.operator(p)?;
    let b = to_complex(&rm.b_r);
    let c = to_complex(&rm.c_r);
    let mut blocks = Vec::with_capacity(omegas.len());
    for &w in omegas {
        let lu = reduced_lu(rm.shifted(w, &a_r), w)?;
        let x = checked_solve(&lu, &b, w)?;
        ledger.record_small(rm.n_sources());
        blocks.push(&c * x);
    }
    Ok(MeasurementMatrix::from_blocks(&blocks))
}

/// Reduced costate Jacobian; `n_omega (n_s + n_d)` small solves.
pub fn rom_jacobian(rm: &ReducedModel, omegas: &[f64], p: &PalsParams, ledger: &mut SolveLedger) -> Result<Jacobian> {
    let a_r = rm.operator(p)?;
    let grads = rm.support_gradients(p);
    let b = to_complex(&rm.b_r);
    let ct = to_complex(&rm.c_r.transpose());
    let vs = to_complex(&rm.v_support);
    let mut blocks = Vec::with_capacity(omegas.len());
    for &w in omegas {
        let k = rm.shifted(w, &a_r);
        let lu = reduced_lu(k.clone(), w)?;
        let y = checked_solve(&lu, &b, w)?;
        let lu_t = reduced_lu(k.transpose(), w)?;
        let z = checked_solve(&lu_t, &ct, w)?;
        ledger.record_small(rm.n_sources() + rm.n_detectors());
        // lift to the support rows: -Z^T V_S^T diag(g) V_S Y
        let y_s = &vs * y;
        let z_s = &vs * z;
        blocks.push(grads.iter().map(|g| costate_product(&z_s, g, &y_s)).collect());
    }
    Ok(Jacobian { blocks })
}

/// `-C_r K_r^{-1} (i E_r / nu) K_r^{-1} B_r`; records `2 n_s` small solves.
pub fn rom_derivative_omega(
    rm: &ReducedModel,
    omega: f64,
    p: &PalsParams,
    ledger: &mut SolveLedger,
) -> Result<DMatrix<Complex64>> {
    let a_r = rm.operator(p)?;
    let lu = reduced_lu(rm.shifted(omega, &a_r), omega)?;
    let x = checked_solve(&lu, &to_complex(&rm.b_r), omega)?;
    let ex = to_complex(&rm.e_r) * x * Complex64::new(0.0, 1.0 / rm.light_speed);
    let y = checked_solve(&lu, &ex, omega)?;
    ledger.record_small(2 * rm.n_sources());
    Ok(-(to_complex(&rm.c_r) * y))
}
