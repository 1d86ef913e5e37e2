//! Scenario files: a JSON tree describing the grid, the medium, the true anomaly,
//! the frequencies and every solver setting of an experiment.

use std::path::Path;

use romdot_core::diagnostics::LineAnomaly;
use romdot_core::forward::{assemble_system, build_grid, Grid, MediumParams, SourceDetectorLayout};
use romdot_core::inversion::{InversionConfig, Mode, TrustRegionConfig};
use romdot_core::pals::{PalsConfig, PalsParams};
use romdot_core::sketch::{SketchConfig, SketchDistribution};
use romdot_core::solver::{Backend, SolveConfig};
use romdot_core::transfer::FullModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub grid: GridSpec,
    #[serde(default)]
    pub medium: MediumSpec,
    pub layout: LayoutSpec,
    #[serde(default)]
    pub pals: PalsSpec,
    /// Bumps of the anomaly that generates the data.
    pub truth: Vec<BumpSpec>,
    #[serde(default)]
    pub initial: InitialSpec,
    pub omegas: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise_delta: f64,
    /// Seeds the measurement noise and the sketches.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sketch: SketchSpec,
    #[serde(default)]
    pub inversion: InversionSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

fn default_noise() -> f64 {
    1e-3
}

/// `nodes = [n]` selects the `n`-per-axis box with half-widths 1 and depth 2;
/// otherwise `nodes` and `extents` are passed through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub extents: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MediumSpec {
    pub diffusion: f64,
    pub light_speed: f64,
    pub mu_background: f64,
    /// Heterogeneity of the data-generating medium, relative to `mu_background`.
    pub heterogeneity: f64,
    pub rng_seed: u64,
}

impl Default for MediumSpec {
    fn default() -> Self {
        MediumSpec {
            diffusion: 1.0,
            light_speed: 1.0,
            mu_background: 0.05,
            heterogeneity: 0.0025,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub n_sources: usize,
    pub n_detectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PalsSpec {
    pub c0: f64,
    pub eps: f64,
    pub mu_low: f64,
    pub mu_high: f64,
}

impl Default for PalsSpec {
    fn default() -> Self {
        let c = PalsConfig::default();
        PalsSpec {
            c0: c.c0,
            eps: c.eps,
            mu_low: c.mu_low,
            mu_high: c.mu_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub alpha: f64,
    pub beta: f64,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InitialSpec {
    /// `m` bumps per axis with alternating signs.
    Lattice {
        m: usize,
        beta: f64,
        alpha_pos: f64,
        alpha_neg: f64,
    },
    Bumps(Vec<BumpSpec>),
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::Lattice {
            m: 2,
            beta: 2.0,
            alpha_pos: 0.5,
            alpha_neg: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchSpec {
    pub l_s: Option<usize>,
    pub l_d: Option<usize>,
    pub distribution: String,
    pub fresh_per_point: bool,
}

impl Default for SketchSpec {
    fn default() -> Self {
        SketchSpec {
            l_s: None,
            l_d: None,
            distribution: "rademacher".into(),
            fresh_per_point: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSpec {
    pub n_k: usize,
    pub stop_factor: f64,
    pub trunc_tol: f64,
    pub initial_radius: f64,
    pub max_iters: usize,
    pub solver: SolverSpec,
}

impl Default for InversionSpec {
    fn default() -> Self {
        let tr = TrustRegionConfig::default();
        InversionSpec {
            n_k: 4,
            stop_factor: 1.1,
            trunc_tol: 1e-8,
            initial_radius: tr.initial_radius,
            max_iters: tr.max_iters,
            solver: SolverSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub backend: String,
    pub tol: f64,
    pub maxit: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let s = SolveConfig::optimization();
        SolverSpec {
            backend: "direct".into(),
            tol: s.tol,
            maxit: s.maxit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelSpec {
    /// Grid indices `[ix, iz]` in 2D or `[ix, iy, iz]` in 3D.
    pub node: Vec<usize>,
    pub delta_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    /// Perturbations compared by the `smw` check; both default to one pixel near the centre.
    pub smw_before: Option<Vec<PixelSpec>>,
    pub smw_after: Option<Vec<PixelSpec>>,
    pub smw_k_max: usize,
    pub lemma2_grids: Vec<usize>,
    pub lemma2_anomaly: LineAnomalySpec,
    pub eig_k: usize,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec {
            smw_before: None,
            smw_after: None,
            smw_k_max: 16,
            lemma2_grids: vec![33, 65, 129],
            lemma2_anomaly: LineAnomalySpec::default(),
            eig_k: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineAnomalySpec {
    pub x_start: f64,
    pub x_end: f64,
    pub depth: f64,
    pub delta_mu: f64,
}

impl Default for LineAnomalySpec {
    fn default() -> Self {
        LineAnomalySpec {
            x_start: -0.25,
            x_end: 0.25,
            depth: 1.0,
            delta_mu: 0.5,
        }
    }
}

impl From<&LineAnomalySpec> for LineAnomaly {
    fn from(s: &LineAnomalySpec) -> Self {
        LineAnomaly {
            x_start: s.x_start,
            x_end: s.x_end,
            depth: s.depth,
            delta_mu: s.delta_mu,
        }
    }
}

/// Everything a command needs, assembled from a scenario.
pub struct Setup {
    pub grid: Grid,
    /// System that generates the data (with heterogeneity).
    pub truth: FullModel,
    /// Homogeneous-background system used by the inversion.
    pub model: FullModel,
    pub p_true: PalsParams,
    pub p0: PalsParams,
    pub pals: PalsConfig,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn bumps(dim: usize, specs: &[BumpSpec], what: &str) -> CliResult<PalsParams> {
    let mut out = Vec::with_capacity(specs.len());
    for (k, b) in specs.iter().enumerate() {
        if b.center.len() != dim {
            return Err(invalid(format!(
                "{what}[{k}].center has {} coordinates, expected {dim}",
                b.center.len()
            )));
        }
        let mut c = [0.0; 3];
        c[..dim].copy_from_slice(&b.center);
        out.push((b.alpha, b.beta, c));
    }
    Ok(PalsParams::from_bumps(dim, &out)?)
}

impl Scenario {
    pub fn from_path(path: &Path) -> CliResult<Scenario> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let sc: Scenario = serde_json::from_str(&text).map_err(|source| CliError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.omegas.is_empty() {
            return Err(invalid("omegas must list at least one frequency"));
        }
        if self.omegas.iter().any(|w| !w.is_finite()) {
            return Err(invalid("omegas must be finite"));
        }
        if self.truth.is_empty() {
            return Err(invalid("truth must contain at least one bump"));
        }
        if self.inversion.n_k == 0 {
            return Err(invalid("inversion.n_k must be at least 1"));
        }
        if self.noise_delta.is_nan() || self.noise_delta < 0.0 {
            return Err(invalid("noise_delta must be nonnegative"));
        }
        self.sketch_config(1, 1).map(|_| ())?;
        self.solver_config().map(|_| ())
    }

    pub fn grid(&self) -> CliResult<Grid> {
        let g = &self.grid;
        match (&g.nodes[..], &g.extents) {
            ([n], None) => Ok(Grid::cube(g.dim, *n)?),
            (nodes, Some(ext)) => Ok(build_grid(g.dim, nodes, ext)?),
            (_, None) => Err(invalid("grid.extents is required unless grid.nodes has a single entry")),
        }
    }

    pub fn pals_config(&self) -> PalsConfig {
        PalsConfig {
            c0: self.pals.c0,
            eps: self.pals.eps,
            mu_low: self.pals.mu_low,
            mu_high: self.pals.mu_high,
            ..PalsConfig::default()
        }
    }

    pub fn solver_config(&self) -> CliResult<SolveConfig> {
        let s = &self.inversion.solver;
        let backend = match s.backend.as_str() {
            "direct" => Backend::Direct,
            "iterative" => Backend::Iterative,
            other => return Err(invalid(format!("unknown solver backend '{other}'"))),
        };
        let cfg = SolveConfig {
            backend,
            tol: s.tol,
            maxit: s.maxit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sketch widths default to `ceil(n / 4)`, at least 8 and at most `n`.
    pub fn sketch_config(&self, n_s: usize, n_d: usize) -> CliResult<SketchConfig> {
        let distribution = match self.sketch.distribution.as_str() {
            "rademacher" => SketchDistribution::Rademacher,
            "gaussian" => SketchDistribution::Gaussian,
            other => return Err(invalid(format!("unknown sketch distribution '{other}'"))),
        };
        let d = SketchConfig::default_for(n_s, n_d, self.seed);
        Ok(SketchConfig {
            l_s: self.sketch.l_s.unwrap_or(d.l_s),
            l_d: self.sketch.l_d.unwrap_or(d.l_d),
            distribution,
            seed: self.seed,
            fresh_per_point: self.sketch.fresh_per_point,
        })
    }

    pub fn inversion_config(&self, mode: Mode, n_s: usize, n_d: usize) -> CliResult<InversionConfig> {
        let inv = &self.inversion;
        let cfg = InversionConfig {
            mode,
            n_k: inv.n_k,
            omegas: self.omegas.clone(),
            noise_delta: self.noise_delta,
            stop_factor: inv.stop_factor,
            tr: TrustRegionConfig {
                initial_radius: inv.initial_radius,
                max_iters: inv.max_iters,
                ..TrustRegionConfig::default()
            },
            seed: self.seed,
            trunc_tol: inv.trunc_tol,
            sketch: self.sketch_config(n_s, n_d)?,
            solver: self.solver_config()?,
        };
        cfg.validate()?;
        if mode == Mode::RomRand {
            cfg.sketch.validate(n_s, n_d)?;
        }
        Ok(cfg)
    }

    pub fn setup(&self) -> CliResult<Setup> {
        let grid = self.grid()?;
        let dim = grid.dim();
        let layout = SourceDetectorLayout::regular(&grid, self.layout.n_sources, self.layout.n_detectors)?;
        let m = &self.medium;
        let base = MediumParams {
            diffusion: m.diffusion,
            light_speed: m.light_speed,
            mu_background: m.mu_background,
            heterogeneity_sigma: 0.0,
            rng_seed: m.rng_seed,
        };
        base.validate()?;
        let hetero = MediumParams {
            heterogeneity_sigma: m.heterogeneity * m.mu_background,
            ..base.clone()
        };
        hetero.validate()?;
        let pals = self.pals_config();
        pals.validate()?;
        let truth_sys = assemble_system(&grid, &hetero, &layout, &hetero.background_field(&grid))?;
        let sys = assemble_system(&grid, &base, &layout, &base.background_field(&grid))?;
        let p_true = bumps(dim, &self.truth, "truth")?;
        let p0 = match &self.initial {
            InitialSpec::Lattice {
                m,
                beta,
                alpha_pos,
                alpha_neg,
            } => PalsParams::lattice(&grid, *m, *beta, *alpha_pos, *alpha_neg)?,
            InitialSpec::Bumps(b) => bumps(dim, b, "initial")?,
        };
        for (p, what) in [(&p_true, "truth"), (&p0, "initial guess")] {
            if !p.is_admissible() {
                return Err(invalid(format!("{what} has a nonpositive width parameter")));
            }
        }
        Ok(Setup {
            truth: FullModel::new(grid.clone(), truth_sys, pals.clone())?,
            model: FullModel::new(grid.clone(), sys, pals.clone())?,
            grid,
            p_true,
            p0,
            pals,
        })
    }

    /// Grid node for a `[ix, iz]` or `[ix, iy, iz]` index triple.
    pub fn pixel_node(grid: &Grid, idx: &[usize]) -> CliResult<usize> {
        let (ix, iy, iz) = match (grid.dim(), idx) {
            (2, [ix, iz]) => (*ix, 0, *iz),
            (3, [ix, iy, iz]) => (*ix, *iy, *iz),
            _ => return Err(invalid(format!("pixel index {idx:?} does not match a {}D grid", grid.dim()))),
        };
        if ix >= grid.nx() || iy >= grid.ny() || iz >= grid.nz() {
            return Err(invalid(format!("pixel index {idx:?} outside the grid")));
        }
        Ok(grid.node(ix, iy, iz))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "grid": {"dim": 2, "nodes": [17]},
        "layout": {"n_sources": 4, "n_detectors": 4},
        "truth": [{"alpha": 1.0, "beta": 2.5, "center": [0.1, 0.9]}],
        "omegas": [0.0, 0.05]
    }"#;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let sc: Scenario = serde_json::from_str(MINIMAL).unwrap();
        sc.validate().unwrap();
        assert_eq!(sc.noise_delta, 1e-3);
        assert_eq!(sc.inversion.n_k, 4);
        assert_eq!(sc.diagnostics.lemma2_grids, vec![33, 65, 129]);
        let s = sc.setup().unwrap();
        assert_eq!(s.grid.n_nodes(), 17 * 17);
        assert_eq!(s.p0.n_bumps(), 4);
        assert_ne!(s.truth.sys.a0, s.model.sys.a0);
    }

    #[test]
    fn unknown_keys_are_reported_with_position() {
        let bad = MINIMAL.replace("\"omegas\"", "\"omega\"");
        let err = serde_json::from_str::<Scenario>(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("omega") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut sc: Scenario = serde_json::from_str(MINIMAL).unwrap();
        sc.truth[0].center = vec![0.0];
        assert!(matches!(sc.setup(), Err(CliError::Invalid(_))));
        let mut sc: Scenario = serde_json::from_str(MINIMAL).unwrap();
        sc.inversion.solver.backend = "magic".into();
        assert!(sc.validate().is_err());
        let mut sc: Scenario = serde_json::from_str(MINIMAL).unwrap();
        sc.omegas.clear();
        assert_eq!(sc.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn explicit_extents() {
        let mut sc: Scenario = serde_json::from_str(MINIMAL).unwrap();
        sc.grid = GridSpec {
            dim: 3,
            nodes: vec![17, 17, 5],
            extents: Some(vec![1.0, 1.0, 0.5]),
        };
        assert_eq!(sc.grid().unwrap().nz(), 5);
        sc.grid.extents = None;
        assert!(sc.grid().is_err());
    }
}
