//! Candidate builds spread over a rayon pool. Blocks are computed independently,
//! collected in `(sample, frequency)` order and their ledgers merged in that same
//! order, so the result does not depend on the number of threads.

use rayon::prelude::*;
use romdot_core::inversion::CandidateBuilder;
use romdot_core::pals::PalsParams;
use romdot_core::rom::{candidate_block_full, candidate_block_randomized, CandidateBasis, CandidateBlock, Provenance};
use romdot_core::sketch::SketchConfig;
use romdot_core::solver::{SolveConfig, SolveLedger};
use romdot_core::transfer::FullModel;
use romdot_core::{Error, Result};

pub struct RayonBuilder;

fn pairs(samples: &[PalsParams], omegas: &[f64]) -> Result<Vec<(usize, usize)>> {
    if samples.is_empty() || omegas.is_empty() {
        return Err(Error::Config("need at least one parameter sample and one frequency".into()));
    }
    Ok((0..samples.len())
        .flat_map(|i| (0..omegas.len()).map(move |j| (i, j)))
        .collect())
}

fn gather(
    results: Vec<Result<(CandidateBlock, SolveLedger)>>,
    provenance: Provenance,
    ledger: &mut SolveLedger,
) -> Result<CandidateBasis> {
    let mut blocks = Vec::with_capacity(results.len());
    for r in results {
        let (block, l) = r?;
        ledger.merge(&l);
        blocks.push(block);
    }
    Ok(CandidateBasis { blocks, provenance })
}

impl CandidateBuilder for RayonBuilder {
    fn full(
        &self,
        model: &FullModel,
        samples: &[PalsParams],
        omegas: &[f64],
        solver: &SolveConfig,
        ledger: &mut SolveLedger,
    ) -> Result<CandidateBasis> {
        let results = pairs(samples, omegas)?
            .into_par_iter()
            .map(|(i, j)| {
                let mut l = SolveLedger::default();
                candidate_block_full(model, &samples[i], i, j, omegas[j], solver, &mut l).map(|b| (b, l))
            })
            .collect();
        gather(results, Provenance::Full, ledger)
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
        sketch.validate(model.n_sources(), model.n_detectors())?;
        let results = pairs(samples, omegas)?
            .into_par_iter()
            .map(|(i, j)| {
                let mut l = SolveLedger::default();
                candidate_block_randomized(model, &samples[i], i, j, omegas[j], sketch, solver, &mut l)
                    .map(|b| (b, l))
            })
            .collect();
        gather(results, Provenance::Randomized, ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use romdot_core::forward::{assemble_system, Grid, MediumParams, SourceDetectorLayout};
    use romdot_core::inversion::SequentialBuilder;
    use romdot_core::pals::PalsConfig;

    fn setup() -> (FullModel, Vec<PalsParams>) {
        let grid = Grid::cube(2, 13).unwrap();
        let layout = SourceDetectorLayout::regular(&grid, 6, 6).unwrap();
        let medium = MediumParams::default();
        let sys = assemble_system(&grid, &medium, &layout, &medium.background_field(&grid)).unwrap();
        let m = FullModel::new(grid, sys, PalsConfig::default()).unwrap();
        let ps = vec![
            PalsParams::from_bumps(2, &[(0.5, 2.0, [0.0, 1.0, 0.0])]).unwrap(),
            PalsParams::from_bumps(2, &[(0.7, 2.2, [0.1, 0.9, 0.0])]).unwrap(),
        ];
        (m, ps)
    }

    #[test]
    fn matches_sequential_build_on_any_pool_size() {
        let (m, ps) = setup();
        let omegas = [0.0, 0.5];
        let solver = SolveConfig::basis();
        let sketch = SketchConfig::new(3, 3, 17);
        let mut ls = SolveLedger::default();
        let seq_full = SequentialBuilder.full(&m, &ps, &omegas, &solver, &mut ls).unwrap();
        let seq_rand = SequentialBuilder.randomized(&m, &ps, &omegas, &sketch, &solver, &mut ls).unwrap();
        for threads in [1, 3] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut lp = SolveLedger::default();
            let (full, rand) = pool.install(|| {
                (
                    RayonBuilder.full(&m, &ps, &omegas, &solver, &mut lp).unwrap(),
                    RayonBuilder.randomized(&m, &ps, &omegas, &sketch, &solver, &mut lp).unwrap(),
                )
            });
            assert_eq!(full, seq_full);
            assert_eq!(rand, seq_rand);
            assert_eq!(lp, ls);
        }
        assert_eq!(ls.large_solves, 2 * 2 * 12 + 2 * 2 * 6);
    }

    #[test]
    fn errors_name_the_failing_point() {
        let (m, mut ps) = setup();
        ps[1] = PalsParams::from_bumps(2, &[(0.7, -1.0, [0.1, 0.9, 0.0])]).unwrap();
        let err = RayonBuilder
            .full(&m, &ps, &[0.0], &SolveConfig::basis(), &mut SolveLedger::default())
            .unwrap_err();
        assert!(matches!(err, Error::AtSample { point: 1, freq: 0, .. }), "{err:?}");
    }
}
