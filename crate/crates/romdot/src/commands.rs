//! The `simulate`, `invert` and `diagnose` commands. Each one reads a scenario,
//! runs the corresponding computation and writes its reports into an output directory.

use std::path::Path;

use romdot_core::diagnostics::{
    canonical_angles, full_build_solves, laplacian_eigpair_check, lemma2_trend, pixel_perturbation,
    randomized_build_solves, singular_value_report, smw_update_check, solve_count_report, subspace_gap_trace,
    RunCounts, SolveCountRow, RANK_LADDER,
};
use romdot_core::inversion::{
    run_inversion, select_sample_points, simulate_data, CandidateBuilder, InversionProblem, InversionResult, Mode,
    SimulatedData, StopReason, StopRule, TrustRegionConfig,
};
use romdot_core::pals::{absorption_field, PalsParams};
use romdot_core::rom::{global_basis, CandidateBasis};
use romdot_core::solver::{SolveConfig, SolveLedger};
use romdot_core::transfer::measurement_matrix;

use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, fmt_f64, write_basis, write_csv, write_field_pgm, write_key_values, write_matrix, MatrixData};
use crate::parallel::RayonBuilder;
use crate::scenario::{Scenario, Setup};

fn basis_solver(sc: &Scenario) -> CliResult<SolveConfig> {
    let s = sc.solver_config()?;
    Ok(SolveConfig {
        tol: s.tol.min(SolveConfig::basis().tol),
        ..s
    })
}

fn simulate_for(sc: &Scenario, setup: &Setup, ledger: &mut SolveLedger) -> CliResult<SimulatedData> {
    Ok(simulate_data(
        &setup.truth,
        &sc.omegas,
        &setup.p_true,
        sc.noise_delta,
        sc.seed,
        &sc.solver_config()?,
        ledger,
    )?)
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Noise => "noise",
        StopReason::MaxIter => "max_iter",
        StopReason::Stagnation => "stagnation",
        StopReason::AcceptLimit => "accept_limit",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateReport {
    pub data: SimulatedData,
    pub ledger: SolveLedger,
}

pub fn simulate(sc: &Scenario, out: &Path) -> CliResult<SimulateReport> {
    ensure_dir(out)?;
    let setup = sc.setup()?;
    let mut ledger = SolveLedger::default();
    let data = simulate_for(sc, &setup, &mut ledger)?;
    write_matrix(&out.join("data.mat"), &MatrixData::Complex(data.data.clone()))?;
    write_matrix(&out.join("clean.mat"), &MatrixData::Complex(data.clean.clone()))?;
    let field = absorption_field(&setup.grid, &setup.p_true, &setup.pals);
    write_field_pgm(&out.join("truth.pgm"), &setup.grid, &field, setup.pals.mu_low, setup.pals.mu_high)?;
    write_key_values(
        &out.join("simulate.csv"),
        &[
            ("rows", data.data.nrows().to_string()),
            ("cols", data.data.ncols().to_string()),
            ("clean_norm", fmt_f64(data.clean.norm())),
            ("noise_norm", fmt_f64(data.noise_norm)),
            ("large_solves", ledger.large_solves.to_string()),
        ],
    )?;
    Ok(SimulateReport { data, ledger })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertReport {
    pub result: InversionResult,
    /// `|M(p_hat) - D|_F` evaluated with the full-order model.
    pub fom_residual: f64,
    pub verification: SolveLedger,
    pub counts: Vec<SolveCountRow>,
    pub field: Vec<f64>,
}

fn trace_rows(phase: &str, trace: &[romdot_core::inversion::TraceEntry]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|e| {
            vec![
                phase.to_string(),
                e.iteration.to_string(),
                fmt_f64(e.objective),
                fmt_f64(e.residual_norm),
                fmt_f64(e.step_norm),
                fmt_f64(e.radius),
                fmt_f64(e.ratio),
                e.accepted.to_string(),
                e.ledger.large_solves.to_string(),
                e.ledger.small_solves.to_string(),
            ]
        })
        .collect()
}

fn param_rows(p: &PalsParams) -> Vec<Vec<String>> {
    (0..p.n_bumps())
        .map(|k| {
            let c = p.center(k);
            let mut row = vec![k.to_string(), fmt_f64(p.alpha(k)), fmt_f64(p.beta(k))];
            row.extend(c.iter().take(p.dim()).map(|&v| fmt_f64(v)));
            row
        })
        .collect()
}

pub fn invert(sc: &Scenario, mode: Mode, out: &Path, builder: &dyn CandidateBuilder) -> CliResult<InvertReport> {
    ensure_dir(out)?;
    let setup = sc.setup()?;
    let (n_s, n_d) = (setup.model.n_sources(), setup.model.n_detectors());
    let cfg = sc.inversion_config(mode, n_s, n_d)?;
    let problem = InversionProblem {
        truth: &setup.truth,
        model: &setup.model,
        p_true: &setup.p_true,
        p0: &setup.p0,
    };
    let result = run_inversion(&problem, &cfg, builder)?;
    let mut verification = SolveLedger::default();
    let m_hat = measurement_matrix(&setup.model, &sc.omegas, &result.p_hat, &cfg.solver, &mut verification)?.m;
    let fom_residual = (&m_hat - &result.data.data).norm();

    let n_k = result.samples.len();
    let n_w = sc.omegas.len();
    let expected_build = match mode {
        Mode::Fom => None,
        Mode::RomFull => Some(full_build_solves(n_k, n_w, n_s, n_d)),
        Mode::RomRand => Some(randomized_build_solves(n_k, n_w, cfg.sketch.l_s, cfg.sketch.l_d)),
    };
    let l = &result.ledgers;
    let total = l.inversion_total();
    let method = mode.to_string();
    let row = |phase: &str, led: &SolveLedger, expected: Option<u64>| RunCounts {
        method: format!("{method}/{phase}"),
        large: led.large_solves,
        small: led.small_solves,
        r: result.r,
        expected_large: expected,
    };
    let counts = solve_count_report(&[
        row("data", &l.data, None),
        row("selection", &l.selection, None),
        row("build", &l.build, expected_build.or(Some(0))),
        row("optimization", &l.optimization, None),
        row("total", &total, None),
        row("verification", &verification, None),
    ])?;

    let prefix = |name: &str| out.join(format!("{method}_{name}"));
    let header = [
        "phase", "iteration", "objective", "residual_norm", "step_norm", "radius", "ratio", "accepted", "large_solves",
        "small_solves",
    ];
    let final_phase = if mode == Mode::Fom { "fom" } else { "rom" };
    let mut rows = trace_rows("selection", &result.selection_trace);
    rows.extend(trace_rows(final_phase, &result.trace));
    write_csv(&prefix("trace.csv"), &header, rows)?;
    let coord = ["c1", "c2", "c3"];
    let mut pheader = vec!["bump", "alpha", "beta"];
    pheader.extend(&coord[..setup.grid.dim()]);
    write_csv(&prefix("params.csv"), &pheader, param_rows(&result.p_hat))?;
    write_csv(
        &prefix("ledger.csv"),
        &["method", "large_solves", "small_solves", "r"],
        counts.iter().map(|c| {
            vec![
                c.method.clone(),
                c.large.to_string(),
                c.small.to_string(),
                c.r.map(|r| r.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    let field = absorption_field(&setup.grid, &result.p_hat, &setup.pals);
    write_field_pgm(&prefix("recovered.pgm"), &setup.grid, &field, setup.pals.mu_low, setup.pals.mu_high)?;
    if let Some(v) = &result.v_r {
        write_basis(&prefix("basis.mat"), v)?;
    }
    write_key_values(
        &prefix("summary.csv"),
        &[
            ("mode", method.clone()),
            ("stopped_by", stop_name(result.stopped_by).to_string()),
            ("residual_norm", fmt_f64(result.residual_norm)),
            ("fom_residual_norm", fmt_f64(fom_residual)),
            ("noise_norm", fmt_f64(result.noise_norm)),
            ("target", fmt_f64(cfg.stop_factor * result.noise_norm)),
            ("iterations", result.trace.len().saturating_sub(1).to_string()),
            ("sample_points", n_k.to_string()),
            ("r", result.r.map(|r| r.to_string()).unwrap_or_default()),
        ],
    )?;
    Ok(InvertReport {
        result,
        fom_residual,
        verification,
        counts,
        field,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Svd,
    Angles,
    Gap,
    Smw,
    Lemma2,
    Eig,
}

impl std::str::FromStr for Which {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "svd" => Which::Svd,
            "angles" => Which::Angles,
            "gap" => Which::Gap,
            "smw" => Which::Smw,
            "lemma2" => Which::Lemma2,
            "eig" => Which::Eig,
            other => return Err(format!("unknown diagnostic '{other}'")),
        })
    }
}

/// Parameter samples chosen by the full-order method, as used for the reduced models.
pub fn sample_points(sc: &Scenario, setup: &Setup) -> CliResult<(Vec<PalsParams>, SolveLedger)> {
    let mut ledger = SolveLedger::default();
    let data = simulate_for(sc, setup, &mut ledger)?;
    let stop = StopRule {
        noise_norm: data.noise_norm,
        stop_factor: sc.inversion.stop_factor,
        accept_limit: None,
    };
    let tr = TrustRegionConfig {
        initial_radius: sc.inversion.initial_radius,
        max_iters: sc.inversion.max_iters,
        ..TrustRegionConfig::default()
    };
    let mut sel = SolveLedger::default();
    let (pts, _) = select_sample_points(
        &setup.model,
        &sc.omegas,
        &data.data,
        &setup.p0,
        sc.inversion.n_k,
        &stop,
        &tr,
        &sc.solver_config()?,
        &mut sel,
    )?;
    Ok((pts, sel))
}

/// Full and randomized candidates at the scenario's sample points.
pub fn candidates(
    sc: &Scenario,
    setup: &Setup,
    builder: &dyn CandidateBuilder,
) -> CliResult<(CandidateBasis, CandidateBasis, SolveLedger, SolveLedger)> {
    let (pts, _) = sample_points(sc, setup)?;
    let solver = basis_solver(sc)?;
    let sketch = sc.sketch_config(setup.model.n_sources(), setup.model.n_detectors())?;
    let (mut lf, mut lr) = (SolveLedger::default(), SolveLedger::default());
    let full = builder.full(&setup.model, &pts, &sc.omegas, &solver, &mut lf)?;
    let rand = builder.randomized(&setup.model, &pts, &sc.omegas, &sketch, &solver, &mut lr)?;
    Ok((full, rand, lf, lr))
}

fn opt(v: Option<&f64>) -> String {
    v.map(|&x| fmt_f64(x)).unwrap_or_default()
}

pub fn diagnose(sc: &Scenario, which: Which, out: &Path, builder: &dyn CandidateBuilder) -> CliResult<()> {
    ensure_dir(out)?;
    match which {
        Which::Svd => {
            let setup = sc.setup()?;
            let (pts, _) = sample_points(sc, &setup)?;
            let mut l = SolveLedger::default();
            let cand = builder.full(&setup.model, &pts, &sc.omegas, &basis_solver(sc)?, &mut l)?;
            let (v, w) = (singular_value_report(&cand.v_matrix()), singular_value_report(&cand.w_matrix()));
            let n = v.sigma.len().max(w.sigma.len());
            write_csv(
                &out.join("svd.csv"),
                &["index", "sigma_v", "sigma_w"],
                (0..n).map(|k| vec![k.to_string(), opt(v.sigma.get(k)), opt(w.sigma.get(k))]),
            )?;
            write_csv(
                &out.join("svd_rank.csv"),
                &["tol", "rank_v", "rank_w", "columns_v", "columns_w"],
                RANK_LADDER.iter().map(|&t| {
                    vec![
                        fmt_f64(t),
                        v.rank_at(t).to_string(),
                        w.rank_at(t).to_string(),
                        v.columns.to_string(),
                        w.columns.to_string(),
                    ]
                }),
            )
        }
        Which::Angles => {
            let setup = sc.setup()?;
            let (full, rand, lf, lr) = candidates(sc, &setup, builder)?;
            let gf = global_basis(&full, sc.inversion.trunc_tol)?;
            let gr = global_basis(&rand, sc.inversion.trunc_tol)?;
            let rep = canonical_angles(&gf.v_r, &gr.v_r)?;
            write_csv(
                &out.join("angles.csv"),
                &["index", "cosine"],
                rep.cosines.iter().enumerate().map(|(k, c)| vec![k.to_string(), fmt_f64(*c)]),
            )?;
            write_key_values(
                &out.join("angles_summary.csv"),
                &[
                    ("r_full", gf.r.to_string()),
                    ("r_randomized", gr.r.to_string()),
                    ("build_solves_full", lf.large_solves.to_string()),
                    ("build_solves_randomized", lr.large_solves.to_string()),
                    ("min_cosine", fmt_f64(rep.min_cosine())),
                ],
            )
        }
        Which::Gap => {
            let setup = sc.setup()?;
            let cfg = sc.inversion_config(Mode::RomFull, setup.model.n_sources(), setup.model.n_detectors())?;
            let problem = InversionProblem {
                truth: &setup.truth,
                model: &setup.model,
                p_true: &setup.p_true,
                p0: &setup.p0,
            };
            let res = run_inversion(&problem, &cfg, builder)?;
            let v_r = res.v_r.as_ref().expect("reduced modes return a basis");
            let mut rows = Vec::new();
            let mut l = SolveLedger::default();
            for (j, &w) in sc.omegas.iter().enumerate() {
                let reps = subspace_gap_trace(v_r, &setup.model, &res.iterates, w, &cfg.solver, &mut l)?;
                for (s, rep) in reps.iter().enumerate() {
                    let mean = rep.cosines.iter().sum::<f64>() / rep.cosines.len().max(1) as f64;
                    rows.push(vec![
                        s.to_string(),
                        j.to_string(),
                        fmt_f64(rep.min_cosine()),
                        fmt_f64(mean),
                        rep.dim_w.to_string(),
                    ]);
                }
            }
            write_csv(
                &out.join("gap.csv"),
                &["iterate", "freq", "min_cosine", "mean_cosine", "dim"],
                rows,
            )
        }
        Which::Smw => {
            let setup = sc.setup()?;
            let g = &setup.grid;
            let node = |idx: &[usize]| Scenario::pixel_node(g, idx);
            let centre = |dx: usize| -> Vec<usize> {
                if g.dim() == 2 {
                    vec![g.nx() / 2 + dx, g.nz() / 2]
                } else {
                    vec![g.nx() / 2 + dx, g.ny() / 2, g.nz() / 2]
                }
            };
            let mu = setup.pals.mu_high;
            let pick = |spec: &Option<Vec<crate::scenario::PixelSpec>>, dx: usize| -> CliResult<Vec<(usize, f64)>> {
                match spec {
                    Some(list) => list.iter().map(|p| Ok((node(&p.node)?, p.delta_mu))).collect(),
                    None => Ok(vec![(node(&centre(dx))?, mu)]),
                }
            };
            let before = pixel_perturbation(&setup.model.sys, &pick(&sc.diagnostics.smw_before, 0)?)?;
            let after = pixel_perturbation(&setup.model.sys, &pick(&sc.diagnostics.smw_after, 1)?)?;
            let rep = smw_update_check(
                &setup.model.sys,
                &before,
                &after,
                sc.diagnostics.smw_k_max,
                &basis_solver(sc)?,
                &mut SolveLedger::default(),
            )?;
            write_key_values(
                &out.join("smw.csv"),
                &[
                    ("k_before", rep.k_i.to_string()),
                    ("k_after", rep.k_i1.to_string()),
                    ("delta_v_rel", fmt_f64(rep.delta_v_rel)),
                    ("containment_residual", opt(rep.containment_residual.as_ref())),
                    ("bound", opt(rep.bound.as_ref())),
                    ("exceeds_k_max", rep.exceeds_k_max.to_string()),
                ],
            )
        }
        Which::Lemma2 => {
            let rep = lemma2_trend(
                &sc.diagnostics.lemma2_grids,
                &(&sc.diagnostics.lemma2_anomaly).into(),
                &basis_solver(sc)?,
                &mut SolveLedger::default(),
            )?;
            write_csv(
                &out.join("lemma2.csv"),
                &["nodes", "h", "ratio", "bound"],
                rep.points.iter().map(|p| {
                    vec![p.nodes.to_string(), fmt_f64(p.h), fmt_f64(p.ratio), fmt_f64(p.bound)]
                }),
            )?;
            write_key_values(&out.join("lemma2_fit.csv"), &[("slope", fmt_f64(rep.slope))])
        }
        Which::Eig => {
            let rows = laplacian_eigpair_check(sc.diagnostics.eig_k)?;
            write_csv(
                &out.join("eig.csv"),
                &["kx", "ky", "lambda", "residual", "norm"],
                rows.iter().map(|r| {
                    vec![
                        r.kx.to_string(),
                        r.ky.to_string(),
                        fmt_f64(r.lambda),
                        fmt_f64(r.residual),
                        fmt_f64(r.norm),
                    ]
                }),
            )
        }
    }
}

/// Runs `f` on a pool with `threads` workers, or on the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Invalid(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn default_builder() -> RayonBuilder {
    RayonBuilder
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnostic_names() {
        for (s, w) in [("svd", Which::Svd), ("lemma2", Which::Lemma2), ("eig", Which::Eig)] {
            assert_eq!(s.parse::<Which>().unwrap(), w);
        }
        assert!("SVD".parse::<Which>().is_err());
    }

    #[test]
    fn thread_pools() {
        let n = with_threads(Some(2), rayon::current_num_threads).unwrap();
        assert_eq!(n, 2);
        assert!(with_threads(None, || 7).unwrap() == 7);
    }

    #[test]
    fn basis_tolerance_is_capped() {
        let mut sc: Scenario = serde_json::from_str(
            r#"{"grid": {"dim": 2, "nodes": [9]}, "layout": {"n_sources": 2, "n_detectors": 2},
                "truth": [{"alpha": 1.0, "beta": 2.0, "center": [0.0, 1.0]}], "omegas": [0.0]}"#,
        )
        .unwrap();
        sc.inversion.solver.tol = 1e-6;
        assert_eq!(basis_solver(&sc).unwrap().tol, SolveConfig::basis().tol);
        sc.inversion.solver.tol = 1e-13;
        assert_eq!(basis_solver(&sc).unwrap().tol, 1e-13);
    }
}
