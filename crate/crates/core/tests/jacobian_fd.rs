use approx::assert_relative_eq;
use proptest::prelude::*;
use romdot_core::forward::{assemble_system, Grid, MediumParams, SourceDetectorLayout};
use romdot_core::pals::{PalsConfig, PalsParams};
use romdot_core::solver::{SolveConfig, SolveLedger};
use romdot_core::transfer::{jacobian, measurement_matrix, FullModel};

fn model() -> FullModel {
    let grid = Grid::cube(2, 13).unwrap();
    let layout = SourceDetectorLayout::regular(&grid, 3, 3).unwrap();
    let medium = MediumParams::default();
    let sys = assemble_system(&grid, &medium, &layout, &medium.background_field(&grid)).unwrap();
    FullModel::new(grid, sys, PalsConfig::default()).unwrap()
}

/// Central differences of the stacked measurement matrix, one column per parameter.
fn fd_columns(m: &FullModel, omegas: &[f64], p: &PalsParams, step: f64) -> Vec<Vec<f64>> {
    let solver = SolveConfig::basis();
    let mut l = SolveLedger::default();
    (0..p.n_params())
        .map(|k| {
            let mut up = p.as_slice().to_vec();
            let mut dn = up.clone();
            up[k] += step;
            dn[k] -= step;
            let mu = measurement_matrix(m, omegas, &p.with_values(up).unwrap(), &solver, &mut l).unwrap().m;
            let md = measurement_matrix(m, omegas, &p.with_values(dn).unwrap(), &solver, &mut l).unwrap().m;
            let d = (mu - md) / num_complex::Complex64::new(2.0 * step, 0.0);
            d.iter().flat_map(|z| [z.re, z.im]).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn costate_jacobian_matches_central_differences(
        alpha in 0.4f64..1.0,
        beta in 1.5f64..3.0,
        cx in -0.4f64..0.4,
        cz in 0.7f64..1.3,
    ) {
        let m = model();
        let p = PalsParams::from_bumps(2, &[(alpha, beta, [cx, cz, 0.0])]).unwrap();
        let omegas = [0.0, 0.3];
        let jac = jacobian(&m, &omegas, &p, &SolveConfig::basis(), &mut SolveLedger::default()).unwrap();
        let fd = fd_columns(&m, &omegas, &p, 1e-5);
        let (mut num, mut den) = (0.0, 0.0);
        for (k, col) in fd.iter().enumerate() {
            // frequency blocks sit side by side in the column-major measurement matrix
            let ours: Vec<f64> = (0..omegas.len())
                .flat_map(|j| jac.blocks[j][k].iter().flat_map(|z| [z.re, z.im]).collect::<Vec<_>>())
                .collect();
            for (a, b) in ours.iter().zip(col) {
                num += (a - b) * (a - b);
                den += b * b;
            }
        }
        prop_assert!((num / den).sqrt() < 1e-5, "relative error {}", (num / den).sqrt());
    }
}

#[test]
fn jacobian_cost_and_shape() {
    let m = model();
    let p = PalsParams::from_bumps(2, &[(0.7, 2.0, [0.0, 1.0, 0.0]), (-0.2, 2.5, [0.3, 0.8, 0.0])]).unwrap();
    let mut l = SolveLedger::default();
    let jac = jacobian(&m, &[0.0, 1.0, 2.0], &p, &SolveConfig::basis(), &mut l).unwrap();
    assert_eq!(jac.n_omega(), 3);
    assert_eq!(jac.n_params(), 8);
    assert_eq!(l.large_solves, 3 * (3 + 3));
    let jm = jac.matricize();
    assert_eq!(jm.shape(), (2 * 3 * 9, 8));
    assert_relative_eq!(jm.norm(), jac.blocks.iter().flatten().map(|b| b.norm_squared()).sum::<f64>().sqrt(), max_relative = 1e-12);
}
