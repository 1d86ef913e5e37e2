use romdot_core::forward::{assemble_system, Grid, MediumParams, SourceDetectorLayout};
use romdot_core::inversion::{
    run_inversion, InversionConfig, InversionProblem, Mode, SequentialBuilder, StopReason, TrustRegionConfig,
};
use romdot_core::pals::{absorption_field, PalsConfig, PalsParams};
use romdot_core::sketch::SketchConfig;
use romdot_core::solver::SolveConfig;
use romdot_core::transfer::FullModel;

fn model(sigma: f64) -> FullModel {
    let grid = Grid::cube(2, 21).unwrap();
    let layout = SourceDetectorLayout::regular(&grid, 8, 8).unwrap();
    let medium = MediumParams {
        diffusion: 0.1,
        heterogeneity_sigma: sigma,
        rng_seed: 4,
        ..Default::default()
    };
    let sys = assemble_system(&grid, &medium, &layout, &medium.background_field(&grid)).unwrap();
    FullModel::new(grid, sys, PalsConfig::default()).unwrap()
}

fn config(mode: Mode) -> InversionConfig {
    InversionConfig {
        mode,
        n_k: 3,
        omegas: vec![0.0, 0.05],
        noise_delta: 1e-3,
        stop_factor: 1.1,
        tr: TrustRegionConfig::default(),
        seed: 2,
        trunc_tol: 1e-8,
        sketch: SketchConfig::new(4, 4, 9),
        solver: SolveConfig::optimization(),
    }
}

#[test]
fn all_modes_reach_the_noise_level_with_consistent_ledgers() {
    let truth = model(1.25e-4);
    let inv = model(0.0);
    let p_true = PalsParams::from_bumps(2, &[(1.0, 2.5, [0.2, 0.9, 0.0])]).unwrap();
    let p0 = PalsParams::lattice(&inv.grid, 2, 2.0, 0.5, -0.5).unwrap();
    let problem = InversionProblem {
        truth: &truth,
        model: &inv,
        p_true: &p_true,
        p0: &p0,
    };
    let mut fields = Vec::new();
    for mode in [Mode::Fom, Mode::RomFull, Mode::RomRand] {
        let res = run_inversion(&problem, &config(mode), &SequentialBuilder).unwrap();
        assert_eq!(res.stopped_by, StopReason::Noise, "{mode}");
        assert!(res.residual_norm <= 1.1 * res.noise_norm);
        let accepted: Vec<f64> = res.trace.iter().filter(|e| e.accepted).map(|e| e.objective).collect();
        assert!(accepted.windows(2).all(|w| w[1] < w[0]));
        match mode {
            Mode::Fom => assert_eq!(res.ledgers.optimization.small_solves, 0),
            Mode::RomFull => {
                assert_eq!(res.ledgers.build.large_solves, (res.samples.len() * 2 * 16) as u64);
                assert_eq!(res.ledgers.optimization.large_solves, 0);
            }
            Mode::RomRand => {
                assert_eq!(res.ledgers.build.large_solves, (res.samples.len() * 2 * 8) as u64);
                assert_eq!(res.ledgers.optimization.large_solves, 0);
            }
        }
        fields.push(absorption_field(&inv.grid, &res.p_hat, &PalsConfig::default()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fields[2].iter().zip(&fields[0]).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) <= 0.25 * norm(&fields[0]));
}

#[test]
fn inversion_is_deterministic() {
    let truth = model(1.25e-4);
    let inv = model(0.0);
    let p_true = PalsParams::from_bumps(2, &[(1.0, 2.5, [0.2, 0.9, 0.0])]).unwrap();
    let p0 = PalsParams::lattice(&inv.grid, 2, 2.0, 0.5, -0.5).unwrap();
    let problem = InversionProblem {
        truth: &truth,
        model: &inv,
        p_true: &p_true,
        p0: &p0,
    };
    let a = run_inversion(&problem, &config(Mode::RomRand), &SequentialBuilder).unwrap();
    let b = run_inversion(&problem, &config(Mode::RomRand), &SequentialBuilder).unwrap();
    assert_eq!(a, b);
}
