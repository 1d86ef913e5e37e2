//! Nonlinear least-squares inversion for the PaLS parameters.
//!
//! The outer solver is a trust-region Gauss-Newton method. Each subproblem
//! `min |r + J s|` subject to `|s| <= radius` is solved exactly in the basis of a
//! truncated SVD of `J` (singular values below `1e-10 sigma_max` are dropped).
//! Steps are accepted when the ratio of actual to predicted reduction is at least
//! 0.1; the radius doubles when the ratio reaches 0.75 and shrinks by four on a
//! rejection. Iteration stops once the data residual falls below
//! `stop_factor * noise_norm`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pals::PalsParams;
use crate::rom::{
    build_candidate_full, build_candidate_randomized, global_basis, reduce_operators, rom_jacobian, rom_measurement,
    CandidateBasis, ReducedModel,
};
use crate::sketch::SketchConfig;
use crate::solver::{SolveConfig, SolveLedger};
use crate::transfer::{
    forward_states, jacobian, jacobian_from_states, measurement_matrix, stacked_residual, FullModel, MeasurementMatrix,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub data: DMatrix<Complex64>,
    pub clean: DMatrix<Complex64>,
    /// Realized `|D - M|_F`.
    pub noise_norm: f64,
}

/// Measurement matrix of `p_true` plus complex white noise whose expected
/// Frobenius norm is `noise_delta * |M|_F`.
pub fn simulate_data(
    model_true: &FullModel,
    omegas: &[f64],
    p_true: &PalsParams,
    noise_delta: f64,
    seed: u64,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<SimulatedData> {
    if !(noise_delta >= 0.0) {
        return Err(Error::config(format!("noise level must be nonnegative, got {noise_delta}")));
    }
    let clean = measurement_matrix(model_true, omegas, p_true, solver, ledger)?.m;
    if noise_delta == 0.0 {
        return Ok(SimulatedData {
            data: clean.clone(),
            clean,
            noise_norm: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6e6f697365);
    let scale = noise_delta * clean.norm() / libm::sqrt(2.0 * clean.len() as f64);
    let noise = DMatrix::from_fn(clean.nrows(), clean.ncols(), |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(scale * re, scale * im)
    });
    let noise_norm = noise.norm();
    Ok(SimulatedData {
        data: &clean + noise,
        clean,
        noise_norm,
    })
}

/// A residual/Jacobian pair over a real parameter vector.
pub trait LeastSquaresProblem {
    /// Stacked real residual, or `None` when `p` is not admissible.
    fn residual(&mut self, p: &[f64]) -> Result<Option<Vec<f64>>>;
    /// Jacobian of the residual at `p`.
    fn jacobian(&mut self, p: &[f64]) -> Result<DMatrix<f64>>;
    fn ledger(&self) -> SolveLedger;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionConfig {
    pub initial_radius: f64,
    pub shrink: f64,
    pub expand: f64,
    pub accept_ratio: f64,
    pub expand_ratio: f64,
    pub max_iters: usize,
    pub sv_cutoff: f64,
    /// Stop when the radius falls below this value.
    pub min_radius: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig {
            initial_radius: 0.5,
            shrink: 0.25,
            expand: 2.0,
            accept_ratio: 0.1,
            expand_ratio: 0.75,
            max_iters: 100,
            sv_cutoff: 1e-10,
            min_radius: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Noise,
    MaxIter,
    Stagnation,
    /// The requested number of accepted steps was taken.
    AcceptLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Objective at the current iterate after this iteration.
    pub objective: f64,
    pub residual_norm: f64,
    pub step_norm: f64,
    /// Radius used for this iteration's step.
    pub radius: f64,
    pub ratio: f64,
    pub accepted: bool,
    pub ledger: SolveLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionResult {
    pub p: Vec<f64>,
    /// `p0` followed by every accepted iterate.
    pub iterates: Vec<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    pub stopped_by: StopReason,
    pub residual_norm: f64,
    pub accepted_steps: usize,
}

/// Trust-region stopping targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub noise_norm: f64,
    pub stop_factor: f64,
    pub accept_limit: Option<usize>,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Minimizer of `|r + J s|` over `|s| <= radius` within the retained singular subspace.
pub fn trust_region_step(j: &DMatrix<f64>, r: &[f64], radius: f64, sv_cutoff: f64) -> Vec<f64> {
    let np = j.ncols();
    let svd = j.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let sig = &svd.singular_values;
    let smax = sig.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return vec![0.0; np];
    }
    let rv = DVector::from_column_slice(r);
    let keep: Vec<usize> = (0..sig.len()).filter(|&k| sig[k] >= sv_cutoff * smax).collect();
    let g: Vec<f64> = keep.iter().map(|&k| u.column(k).dot(&rv)).collect();
    let coeffs = |lambda: f64| -> Vec<f64> {
        keep.iter()
            .zip(&g)
            .map(|(&k, &gk)| -sig[k] * gk / (sig[k] * sig[k] + lambda))
            .collect()
    };
    let cnorm = |c: &[f64]| norm(c);
    let mut c = coeffs(0.0);
    if cnorm(&c) > radius {
        // |s(lambda)| decreases monotonically in lambda; bracket and bisect
        let mut lo = 0.0;
        let mut hi = smax * smax;
        while cnorm(&coeffs(hi)) > radius {
            hi *= 4.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cnorm(&coeffs(mid)) > radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        c = coeffs(hi);
    }
    let mut s = vec![0.0; np];
    for (&k, &ck) in keep.iter().zip(&c) {
        for (i, si) in s.iter_mut().enumerate() {
            *si += ck * vt[(k, i)];
        }
    }
    s
}

pub fn trust_region_solve(
    problem: &mut dyn LeastSquaresProblem,
    p0: &[f64],
    stop: &StopRule,
    config: &TrustRegionConfig,
) -> Result<TrustRegionResult> {
    if !(stop.stop_factor >= 1.0) {
        return Err(Error::config(format!("stop factor must be at least 1, got {}", stop.stop_factor)));
    }
    if !(config.initial_radius > 0.0) {
        return Err(Error::config("initial trust-region radius must be positive"));
    }
    let target = stop.stop_factor * stop.noise_norm;
    let mut p = p0.to_vec();
    let mut r = problem
        .residual(&p)?
        .ok_or_else(|| Error::config("initial parameters are not admissible"))?;
    let mut f = r.iter().map(|x| x * x).sum::<f64>();
    if !f.is_finite() {
        return Err(Error::NonFinite { iteration: 0 });
    }
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: f,
        residual_norm: libm::sqrt(f),
        step_norm: 0.0,
        radius: config.initial_radius,
        ratio: 0.0,
        accepted: true,
        ledger: problem.ledger(),
    }];
    let mut iterates = vec![p.clone()];
    let mut radius = config.initial_radius;
    let mut accepted_steps = 0;
    let finish = |p: Vec<f64>, iterates, trace, stopped_by, f: f64, accepted_steps| TrustRegionResult {
        p,
        iterates,
        trace,
        stopped_by,
        residual_norm: libm::sqrt(f),
        accepted_steps,
    };
    if libm::sqrt(f) <= target {
        return Ok(finish(p, iterates, trace, StopReason::Noise, f, 0));
    }
    if stop.accept_limit == Some(0) {
        return Ok(finish(p, iterates, trace, StopReason::AcceptLimit, f, 0));
    }
    let mut jac = problem.jacobian(&p)?;
    for iteration in 1..=config.max_iters {
        let s = trust_region_step(&jac, &r, radius, config.sv_cutoff);
        let step_norm = norm(&s);
        let js = &jac * DVector::from_column_slice(&s);
        let model_f: f64 = r.iter().zip(js.iter()).map(|(a, b)| (a + b) * (a + b)).sum();
        let pred = f - model_f;
        if !(pred > 1e-14 * f) || step_norm == 0.0 {
            return Ok(finish(p, iterates, trace, StopReason::Stagnation, f, accepted_steps));
        }
        let trial: Vec<f64> = p.iter().zip(&s).map(|(a, b)| a + b).collect();
        let (ratio, trial_r, trial_f) = match problem.residual(&trial)? {
            Some(rt) => {
                let ft = rt.iter().map(|x| x * x).sum::<f64>();
                if !ft.is_finite() {
                    return Err(Error::NonFinite { iteration });
                }
                ((f - ft) / pred, Some(rt), ft)
            }
            None => (f64::NEG_INFINITY, None, f),
        };
        let used_radius = radius;
        let accepted = ratio >= config.accept_ratio;
        if accepted {
            p = trial;
            r = trial_r.expect("accepted steps are admissible");
            f = trial_f;
            accepted_steps += 1;
            iterates.push(p.clone());
            if ratio >= config.expand_ratio {
                radius *= config.expand;
            }
        } else {
            radius *= config.shrink;
        }
        trace.push(TraceEntry {
            iteration,
            objective: f,
            residual_norm: libm::sqrt(f),
            step_norm,
            radius: used_radius,
            ratio,
            accepted,
            ledger: problem.ledger(),
        });
        if accepted {
            if libm::sqrt(f) <= target {
                return Ok(finish(p, iterates, trace, StopReason::Noise, f, accepted_steps));
            }
            if stop.accept_limit == Some(accepted_steps) {
                return Ok(finish(p, iterates, trace, StopReason::AcceptLimit, f, accepted_steps));
            }
            jac = problem.jacobian(&p)?;
        } else if radius < config.min_radius {
            return Ok(finish(p, iterates, trace, StopReason::Stagnation, f, accepted_steps));
        }
    }
    Ok(finish(p, iterates, trace, StopReason::MaxIter, f, accepted_steps))
}

/// Full-order residual and Jacobian. The Jacobian at the last evaluated point
/// reuses that point's state solutions and only adds the adjoint solves.
pub struct FomProblem<'a> {
    model: &'a FullModel,
    omegas: &'a [f64],
    data: &'a DMatrix<Complex64>,
    template: PalsParams,
    solver: SolveConfig,
    ledger: SolveLedger,
    cache: Option<(Vec<f64>, Vec<DMatrix<Complex64>>)>,
}

impl<'a> FomProblem<'a> {
    pub fn new(
        model: &'a FullModel,
        omegas: &'a [f64],
        data: &'a DMatrix<Complex64>,
        template: &PalsParams,
        solver: SolveConfig,
    ) -> Self {
        FomProblem {
            model,
            omegas,
            data,
            template: template.clone(),
            solver,
            ledger: SolveLedger::default(),
            cache: None,
        }
    }
}

impl LeastSquaresProblem for FomProblem<'_> {
    fn residual(&mut self, p: &[f64]) -> Result<Option<Vec<f64>>> {
        let params = self.template.with_values(p.to_vec())?;
        if !params.is_admissible() {
            return Ok(None);
        }
        let states = forward_states(self.model, self.omegas, &params, &self.solver, &mut self.ledger)?;
        let blocks: Vec<_> = states.iter().map(|x| self.model.sys.observe(x)).collect();
        let m = MeasurementMatrix::from_blocks(&blocks).m;
        self.cache = Some((p.to_vec(), states));
        Ok(Some(stacked_residual(&m, self.data)))
    }

    fn jacobian(&mut self, p: &[f64]) -> Result<DMatrix<f64>> {
        let params = self.template.with_values(p.to_vec())?;
        let j = match &self.cache {
            Some((cp, states)) if cp.as_slice() == p => {
                jacobian_from_states(self.model, self.omegas, &params, states, &self.solver, &mut self.ledger)?
            }
            _ => jacobian(self.model, self.omegas, &params, &self.solver, &mut self.ledger)?,
        };
        Ok(j.matricize())
    }

    fn ledger(&self) -> SolveLedger {
        self.ledger
    }
}

/// Reduced residual and Jacobian; all solves are small.
pub struct RomProblem<'a> {
    rm: &'a ReducedModel,
    omegas: &'a [f64],
    data: &'a DMatrix<Complex64>,
    template: PalsParams,
    ledger: SolveLedger,
}

impl<'a> RomProblem<'a> {
    pub fn new(rm: &'a ReducedModel, omegas: &'a [f64], data: &'a DMatrix<Complex64>, template: &PalsParams) -> Self {
        RomProblem {
            rm,
            omegas,
            data,
            template: template.clone(),
            ledger: SolveLedger::default(),
        }
    }
}

impl LeastSquaresProblem for RomProblem<'_> {
    fn residual(&mut self, p: &[f64]) -> Result<Option<Vec<f64>>> {
        let params = self.template.with_values(p.to_vec())?;
        if !params.is_admissible() {
            return Ok(None);
        }
        let m = rom_measurement(self.rm, self.omegas, &params, &mut self.ledger)?.m;
        Ok(Some(stacked_residual(&m, self.data)))
    }

    fn jacobian(&mut self, p: &[f64]) -> Result<DMatrix<f64>> {
        let params = self.template.with_values(p.to_vec())?;
        Ok(rom_jacobian(self.rm, self.omegas, &params, &mut self.ledger)?.matricize())
    }

    fn ledger(&self) -> SolveLedger {
        self.ledger
    }
}

/// Runs the full-order trust-region method until `n_k - 1` steps have been
/// accepted and returns `p0` with the accepted iterates.
#[allow(clippy::too_many_arguments)]
pub fn select_sample_points(
    model: &FullModel,
    omegas: &[f64],
    data: &DMatrix<Complex64>,
    p0: &PalsParams,
    n_k: usize,
    stop: &StopRule,
    tr: &TrustRegionConfig,
    solver: &SolveConfig,
    ledger: &mut SolveLedger,
) -> Result<(Vec<PalsParams>, TrustRegionResult)> {
    if n_k == 0 {
        return Err(Error::config("need at least one sample point"));
    }
    let mut problem = FomProblem::new(model, omegas, data, p0, *solver);
    let rule = StopRule {
        accept_limit: Some(n_k - 1),
        ..*stop
    };
    let res = trust_region_solve(&mut problem, p0.as_slice(), &rule, tr)?;
    ledger.merge(&problem.ledger());
    let points = res
        .iterates
        .iter()
        .map(|v| p0.with_values(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((points, res))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fom,
    RomFull,
    RomRand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub mode: Mode,
    pub n_k: usize,
    pub omegas: Vec<f64>,
    pub noise_delta: f64,
    pub stop_factor: f64,
    pub tr: TrustRegionConfig,
    pub seed: u64,
    pub trunc_tol: f64,
    pub sketch: SketchConfig,
    pub solver: SolveConfig,
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_k == 0 {
            return Err(Error::config("n_k must be at least 1"));
        }
        if self.omegas.is_empty() {
            return Err(Error::config("need at least one frequency"));
        }
        if !(self.stop_factor >= 1.0) {
            return Err(Error::config("stop factor must be at least 1"));
        }
        if !(self.noise_delta >= 0.0) {
            return Err(Error::config("noise level must be nonnegative"));
        }
        self.solver.validate()
    }
}

/// Builds candidate bases; lets callers substitute a parallel implementation.
pub trait CandidateBuilder {
    fn full(
        &self,
        model: &FullModel,
        samples: &[PalsParams],
        omegas: &[f64],
        solver: &SolveConfig,
        ledger: &mut SolveLedger,
    ) -> Result<CandidateBasis>;

    fn randomized(
        &self,
        model: &FullModel,
        samples: &[PalsParams],
        omegas: &[f64],
        sketch: &SketchConfig,
        solver: &SolveConfig,
        ledger: &mut SolveLedger,
    ) -> Result<CandidateBasis>;
}

pub struct SequentialBuilder;

impl CandidateBuilder for SequentialBuilder {
    fn full(
        &self,
        model: &FullModel,
        samples: &[PalsParams],
        omegas: &[f64],
        solver: &SolveConfig,
        ledger: &mut SolveLedger,
    ) -> Result<CandidateBasis> {
        build_candidate_full(model, samples, omegas, solver, ledger)
    }

    fn randomized(
        &self,
        model: &FullModel,
        samples: &[PalsParams],
        omegas: &[f64],
        sketch: &SketchConfig,
        solver: &SolveConfig,
        ledger: &mut SolveLedger,
    ) -> Result<CandidateBasis> {
        build_candidate_randomized(model, samples, omegas, sketch, solver, ledger)
    }
}

/// Everything needed for one synthetic inversion.
pub struct InversionProblem<'a> {
    /// System generating the data (may carry heterogeneity).
    pub truth: &'a FullModel,
    /// System used by the inversion.
    pub model: &'a FullModel,
    pub p_true: &'a PalsParams,
    pub p0: &'a PalsParams,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseLedgers {
    pub data: SolveLedger,
    pub selection: SolveLedger,
    pub build: SolveLedger,
    pub optimization: SolveLedger,
}

impl PhaseLedgers {
    /// Solves spent by the inversion itself (data simulation excluded).
    pub fn inversion_total(&self) -> SolveLedger {
        let mut t = self.selection;
        t.merge(&self.build);
        t.merge(&self.optimization);
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub mode: Mode,
    pub p_hat: PalsParams,
    /// Trace of the final optimization phase, preceded by the selection phase for ROM modes.
    pub trace: Vec<TraceEntry>,
    pub selection_trace: Vec<TraceEntry>,
    pub stopped_by: StopReason,
    /// Residual of the objective actually minimized (reduced for ROM modes).
    pub residual_norm: f64,
    pub noise_norm: f64,
    pub samples: Vec<PalsParams>,
    /// Start and accepted iterates of the final optimization phase.
    pub iterates: Vec<PalsParams>,
    pub r: Option<usize>,
    /// Global basis of the ROM modes.
    pub v_r: Option<DMatrix<f64>>,
    pub ledgers: PhaseLedgers,
    pub data: SimulatedData,
}

pub fn run_inversion(
    problem: &InversionProblem<'_>,
    config: &InversionConfig,
    builder: &dyn CandidateBuilder,
) -> Result<InversionResult> {
    config.validate()?;
    let mut ledgers = PhaseLedgers::default();
    let data = simulate_data(
        problem.truth,
        &config.omegas,
        problem.p_true,
        config.noise_delta,
        config.seed,
        &config.solver,
        &mut ledgers.data,
    )?;
    let stop = StopRule {
        noise_norm: data.noise_norm,
        stop_factor: config.stop_factor,
        accept_limit: None,
    };
    let omegas = &config.omegas;
    match config.mode {
        Mode::Fom => {
            let mut fom = FomProblem::new(problem.model, omegas, &data.data, problem.p0, config.solver);
            let res = trust_region_solve(&mut fom, problem.p0.as_slice(), &stop, &config.tr)?;
            ledgers.optimization = fom.ledger();
            Ok(InversionResult {
                mode: config.mode,
                p_hat: problem.p0.with_values(res.p.clone())?,
                iterates: res
                    .iterates
                    .iter()
                    .map(|v| problem.p0.with_values(v.clone()))
                    .collect::<Result<Vec<_>>>()?,
                trace: res.trace,
                selection_trace: Vec::new(),
                stopped_by: res.stopped_by,
                residual_norm: res.residual_norm,
                noise_norm: data.noise_norm,
                samples: Vec::new(),
                r: None,
                v_r: None,
                ledgers,
                data,
            })
        }
        Mode::RomFull | Mode::RomRand => {
            let (samples, sel) = select_sample_points(
                problem.model,
                omegas,
                &data.data,
                problem.p0,
                config.n_k,
                &stop,
                &config.tr,
                &config.solver,
                &mut ledgers.selection,
            )?;
            let basis_solver = SolveConfig {
                tol: config.solver.tol.min(1e-10),
                ..config.solver
            };
            let candidate = if config.mode == Mode::RomFull {
                builder.full(problem.model, &samples, omegas, &basis_solver, &mut ledgers.build)?
            } else {
                builder.randomized(problem.model, &samples, omegas, &config.sketch, &basis_solver, &mut ledgers.build)?
            };
            let g = global_basis(&candidate, config.trunc_tol)?;
            let rm = reduce_operators(problem.model, &g.v_r)?;
            let start = samples.last().expect("at least p0").clone();
            let mut rom = RomProblem::new(&rm, omegas, &data.data, problem.p0);
            let mut tr = config.tr.clone();
            if let Some(last) = sel.trace.iter().rev().find(|e| e.accepted && e.iteration > 0) {
                tr.initial_radius = last.radius;
            }
            let res = trust_region_solve(&mut rom, start.as_slice(), &stop, &tr)?;
            ledgers.optimization = rom.ledger();
            Ok(InversionResult {
                mode: config.mode,
                p_hat: problem.p0.with_values(res.p.clone())?,
                iterates: res
                    .iterates
                    .iter()
                    .map(|v| problem.p0.with_values(v.clone()))
                    .collect::<Result<Vec<_>>>()?,
                trace: res.trace,
                selection_trace: sel.trace,
                stopped_by: res.stopped_by,
                residual_norm: res.residual_norm,
                noise_norm: data.noise_norm,
                samples,
                r: Some(g.r),
                v_r: Some(g.v_r),
                ledgers,
                data,
            })
        }
    }
}

impl core::fmt::Display for Mode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Mode::Fom => "fom",
            Mode::RomFull => "rom-full",
            Mode::RomRand => "rom-rand",
        })
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "fom" => Ok(Mode::Fom),
            "rom-full" | "rom_full" => Ok(Mode::RomFull),
            "rom-rand" | "rom_rand" => Ok(Mode::RomRand),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}
