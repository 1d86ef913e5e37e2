//! Random sketching matrices for the randomized candidate bases.
//!
//! Every draw is a pure function of `(seed, sample index, frequency index, side)`.
//! The stream is derived as `ChaCha8Rng::seed_from_u64(seed)` with stream id
//! `(sample << 33) | (freq << 1) | side`, where `side` is 0 for sources and 1 for
//! detectors. With `fresh_per_point = false` every point uses sample and frequency 0.

use alloc::format;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{numerical_floor, thin_svd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SketchDistribution {
    #[default]
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Detector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchConfig {
    pub l_s: usize,
    pub l_d: usize,
    pub distribution: SketchDistribution,
    pub seed: u64,
    pub fresh_per_point: bool,
}

impl SketchConfig {
    pub fn new(l_s: usize, l_d: usize, seed: u64) -> Self {
        SketchConfig {
            l_s,
            l_d,
            distribution: SketchDistribution::Rademacher,
            seed,
            fresh_per_point: true,
        }
    }

    /// Widths `ceil(n / 4)`, at least 8 and at most `n`.
    pub fn default_for(n_s: usize, n_d: usize, seed: u64) -> Self {
        let w = |n: usize| n.div_ceil(4).max(8).min(n);
        SketchConfig::new(w(n_s), w(n_d), seed)
    }

    pub fn validate(&self, n_s: usize, n_d: usize) -> Result<()> {
        if self.l_s == 0 || self.l_s > n_s {
            return Err(Error::config(format!("source sketch width {} must lie in 1..={n_s}", self.l_s)));
        }
        if self.l_d == 0 || self.l_d > n_d {
            return Err(Error::config(format!("detector sketch width {} must lie in 1..={n_d}", self.l_d)));
        }
        Ok(())
    }

    fn stream(&self, sample: usize, freq: usize, side: Side) -> u64 {
        let (i, j) = if self.fresh_per_point { (sample as u64, freq as u64) } else { (0, 0) };
        let s = match side {
            Side::Source => 0,
            Side::Detector => 1,
        };
        (i << 33) | (j << 1) | s
    }
}

/// Draws a `rows x cols` sketch for sample point `sample` and frequency `freq`.
/// Draws with numerical rank below `cols` are discarded and the stream continues.
pub fn draw_sketch(
    rows: usize,
    cols: usize,
    config: &SketchConfig,
    sample: usize,
    freq: usize,
    side: Side,
) -> Result<DMatrix<f64>> {
    if cols == 0 || cols > rows {
        return Err(Error::config(format!("cannot draw a {rows}x{cols} sketch")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream(sample, freq, side));
    for _ in 0..64 {
        let m = DMatrix::from_fn(rows, cols, |_, _| match config.distribution {
            SketchDistribution::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            SketchDistribution::Gaussian => StandardNormal.sample(&mut rng),
        });
        if full_rank(&m) {
            return Ok(m);
        }
    }
    Err(Error::Degenerate(format!("no full-rank {rows}x{cols} sketch after 64 draws")))
}

fn full_rank(m: &DMatrix<f64>) -> bool {
    let (_, s) = thin_svd(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let cut = numerical_floor(m.nrows(), m.ncols()) * smax;
    smax > 0.0 && s.iter().all(|&v| v > cut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rademacher_entries_are_signs() {
        let cfg = SketchConfig::new(5, 5, 11);
        let m = draw_sketch(40, 5, &cfg, 2, 1, Side::Source).unwrap();
        assert!(m.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn moments_of_large_draws() {
        for dist in [SketchDistribution::Rademacher, SketchDistribution::Gaussian] {
            let cfg = SketchConfig {
                distribution: dist,
                ..SketchConfig::new(100, 100, 3)
            };
            let m = draw_sketch(100, 100, &cfg, 0, 0, Side::Detector).unwrap();
            let n = m.len() as f64;
            let mean = m.iter().sum::<f64>() / n;
            let var = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 0.05, "{dist:?} mean {mean}");
            assert!((0.9..=1.1).contains(&var), "{dist:?} var {var}");
        }
    }

    #[test]
    fn points_and_sides_get_distinct_streams() {
        let cfg = SketchConfig::new(4, 4, 5);
        let a = draw_sketch(30, 4, &cfg, 0, 0, Side::Source).unwrap();
        let b = draw_sketch(30, 4, &cfg, 0, 1, Side::Source).unwrap();
        let c = draw_sketch(30, 4, &cfg, 1, 0, Side::Source).unwrap();
        let d = draw_sketch(30, 4, &cfg, 0, 0, Side::Detector).unwrap();
        assert!(a != b && a != c && a != d && b != c);
        let shared = SketchConfig {
            fresh_per_point: false,
            ..cfg
        };
        assert_eq!(
            draw_sketch(30, 4, &shared, 3, 2, Side::Source).unwrap(),
            draw_sketch(30, 4, &shared, 0, 0, Side::Source).unwrap()
        );
    }

    #[test]
    fn wide_requests_rejected() {
        let cfg = SketchConfig::new(4, 4, 5);
        assert!(matches!(draw_sketch(3, 4, &cfg, 0, 0, Side::Source), Err(Error::Config(_))));
        assert!(cfg.validate(3, 10).is_err());
        assert!(cfg.validate(4, 4).is_ok());
    }

    #[test]
    fn default_widths() {
        assert_eq!(SketchConfig::default_for(225, 225, 0).l_s, 57);
        assert_eq!(SketchConfig::default_for(16, 16, 0).l_s, 8);
        assert_eq!(SketchConfig::default_for(4, 6, 0).l_d, 6);
    }

    #[test]
    fn square_sign_sketches_are_full_rank() {
        // small square sign matrices are singular often enough to exercise the redraw
        let cfg = SketchConfig::new(3, 3, 0);
        for i in 0..50 {
            let m = draw_sketch(3, 3, &cfg, i, 0, Side::Source).unwrap();
            assert!(m.clone().lu().determinant().abs() > 0.5);
        }
    }

    proptest! {
        #[test]
        fn identical_requests_are_identical(seed in any::<u64>(), i in 0usize..100, j in 0usize..8, rows in 2usize..40) {
            let cols = 1 + rows / 3;
            let cfg = SketchConfig::new(cols, cols, seed);
            let a = draw_sketch(rows, cols, &cfg, i, j, Side::Source).unwrap();
            let b = draw_sketch(rows, cols, &cfg, i, j, Side::Source).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
