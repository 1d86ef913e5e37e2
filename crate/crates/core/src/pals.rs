//! Parametric level-set absorption model.
//!
//! The level set is a sum of Wendland C2 bumps
//! `phi(x) = sum_j alpha_j psi(beta_j |x - c_j|)`, `psi(r) = max(0, 1 - r)^4 (4 r + 1)`,
//! and the absorption is `mu_low + (mu_high - mu_low) H(phi - c0)` with the arctan
//! smooth Heaviside `H(t) = 1/2 + atan(t / eps) / pi`.
//!
//! Parameters are stored flat, bump by bump, as `[alpha, beta, center...]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::forward::Grid;
use crate::sparse::SparseVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsrbfKind {
    #[default]
    WendlandC2,
}

impl CsrbfKind {
    #[inline]
    pub fn eval(self, s: f64) -> f64 {
        match self {
            CsrbfKind::WendlandC2 => {
                if s >= 1.0 {
                    0.0
                } else {
                    let t = 1.0 - s;
                    let t2 = t * t;
                    t2 * t2 * (4.0 * s + 1.0)
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            CsrbfKind::WendlandC2 => {
                if s >= 1.0 {
                    0.0
                } else {
                    let t = 1.0 - s;
                    -20.0 * s * t * t * t
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalsConfig {
    pub c0: f64,
    pub eps: f64,
    pub mu_low: f64,
    pub mu_high: f64,
    pub csrbf: CsrbfKind,
}

impl Default for PalsConfig {
    fn default() -> Self {
        PalsConfig {
            c0: 0.1,
            eps: 0.05,
            mu_low: 0.0,
            mu_high: 0.5,
            csrbf: CsrbfKind::WendlandC2,
        }
    }
}

impl PalsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("Heaviside width must be positive, got {}", self.eps)));
        }
        if !(self.mu_low >= 0.0 && self.mu_high > self.mu_low) {
            return Err(Error::config(format!(
                "need mu_high > mu_low >= 0, got {} and {}",
                self.mu_high, self.mu_low
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn heaviside(&self, t: f64) -> f64 {
        0.5 + libm::atan(t / self.eps) / PI
    }

    #[inline]
    pub fn heaviside_derivative(&self, t: f64) -> f64 {
        self.eps / (PI * (self.eps * self.eps + t * t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalsParams {
    dim: usize,
    values: Vec<f64>,
}

impl PalsParams {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::config(format!("dimension must be 2 or 3, got {dim}")));
        }
        if values.is_empty() || !values.len().is_multiple_of(dim + 2) {
            return Err(Error::config(format!(
                "{} parameters is not a positive multiple of {}",
                values.len(),
                dim + 2
            )));
        }
        Ok(PalsParams { dim, values })
    }

    /// Parameters for bumps given as `(alpha, beta, center)`.
    pub fn from_bumps(dim: usize, bumps: &[(f64, f64, [f64; 3])]) -> Result<Self> {
        let mut v = Vec::with_capacity(bumps.len() * (dim + 2));
        for (alpha, beta, c) in bumps {
            v.push(*alpha);
            v.push(*beta);
            v.extend_from_slice(&c[..dim]);
        }
        PalsParams::new(dim, v)
    }

    /// Bumps on a regular `m^dim` lattice inside the grid's box with alternating
    /// signs: `alpha_pos` where the lattice index sum is odd, `alpha_neg` otherwise.
    pub fn lattice(grid: &Grid, m: usize, beta: f64, alpha_pos: f64, alpha_neg: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("lattice needs at least one bump per axis"));
        }
        let dim = grid.dim();
        let (a, b, c) = grid.extents();
        let ranges: Vec<(f64, f64)> = if dim == 3 {
            vec![(-a, a), (-b, b), (0.0, c)]
        } else {
            vec![(-a, a), (0.0, c)]
        };
        let at = |axis: usize, k: usize| {
            let (lo, hi) = ranges[axis];
            lo + (k as f64 + 0.5) * (hi - lo) / m as f64
        };
        let count = m.pow(dim as u32);
        let mut bumps = Vec::with_capacity(count);
        for idx in 0..count {
            let mut rem = idx;
            let mut centre = [0.0; 3];
            let mut parity = 0;
            for (axis, slot) in centre.iter_mut().enumerate().take(dim) {
                let k = rem % m;
                rem /= m;
                parity += k;
                *slot = at(axis, k);
            }
            let alpha = if parity % 2 == 1 { alpha_pos } else { alpha_neg };
            bumps.push((alpha, beta, centre));
        }
        PalsParams::from_bumps(dim, &bumps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn n_bumps(&self) -> usize {
        self.values.len() / (self.dim + 2)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::config("parameter vector length changed"));
        }
        Ok(PalsParams { dim: self.dim, values })
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.values[j * (self.dim + 2)]
    }

    pub fn beta(&self, j: usize) -> f64 {
        self.values[j * (self.dim + 2) + 1]
    }

    pub fn center(&self, j: usize) -> &[f64] {
        let s = j * (self.dim + 2) + 2;
        &self.values[s..s + self.dim]
    }

    /// Every dilation positive and every entry finite.
    pub fn is_admissible(&self) -> bool {
        self.values.iter().all(|v| v.is_finite()) && (0..self.n_bumps()).all(|j| self.beta(j) > 0.0)
    }
}

fn distance(x: &[f64], c: &[f64]) -> f64 {
    libm::sqrt(x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Level-set value at `x` (only the first `dim` coordinates are used).
pub fn level_set(x: &[f64], params: &PalsParams, kind: CsrbfKind) -> f64 {
    let x = &x[..params.dim];
    (0..params.n_bumps())
        .map(|j| params.alpha(j) * kind.eval(params.beta(j) * distance(x, params.center(j))))
        .sum()
}

/// Absorption anomaly per grid node (grid order).
pub fn absorption_field(grid: &Grid, params: &PalsParams, config: &PalsConfig) -> Vec<f64> {
    debug_assert_eq!(grid.dim(), params.dim());
    let span = config.mu_high - config.mu_low;
    (0..grid.n_nodes())
        .map(|node| {
            let phi = level_set(&grid.point(node), params, config.csrbf);
            config.mu_low + span * config.heaviside(phi - config.c0)
        })
        .collect()
}

/// Derivative of the absorption field with respect to each parameter, as sparse
/// per-node arrays (grid order). Entries vanish outside the owning bump's support.
pub fn absorption_gradient(grid: &Grid, params: &PalsParams, config: &PalsConfig) -> Vec<SparseVec> {
    let dim = params.dim();
    let stride = dim + 2;
    let span = config.mu_high - config.mu_low;
    let n = grid.n_nodes();
    let points: Vec<[f64; 3]> = (0..n).map(|node| grid.point(node)).collect();
    let dh: Vec<f64> = points
        .iter()
        .map(|x| span * config.heaviside_derivative(level_set(x, params, config.csrbf) - config.c0))
        .collect();

    let mut out = vec![SparseVec::default(); params.n_params()];
    for j in 0..params.n_bumps() {
        let (alpha, beta) = (params.alpha(j), params.beta(j));
        let centre = params.center(j);
        for (node, x) in points.iter().enumerate() {
            let r = distance(&x[..dim], centre);
            let s = beta * r;
            if s >= 1.0 {
                continue;
            }
            let w = dh[node];
            let dpsi = config.csrbf.derivative(s);
            out[j * stride].indices.push(node);
            out[j * stride].values.push(w * config.csrbf.eval(s));
            out[j * stride + 1].indices.push(node);
            out[j * stride + 1].values.push(w * alpha * dpsi * r);
            for d in 0..dim {
                let g = if r > 0.0 {
                    -w * alpha * dpsi * beta * (x[d] - centre[d]) / r
                } else {
                    0.0
                };
                out[j * stride + 2 + d].indices.push(node);
                out[j * stride + 2 + d].values.push(g);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2() -> Grid {
        Grid::cube(2, 21).unwrap()
    }

    #[test]
    fn wendland_values() {
        let k = CsrbfKind::WendlandC2;
        assert_eq!(k.eval(0.0), 1.0);
        assert_eq!(k.eval(1.0), 0.0);
        assert_eq!(k.eval(2.5), 0.0);
        assert_eq!(k.derivative(0.0), 0.0);
        assert!((k.eval(0.5) - 0.0625 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn level_set_at_center_and_outside_support() {
        let p = PalsParams::from_bumps(2, &[(0.7, 2.0, [0.1, 1.0, 0.0])]).unwrap();
        assert_eq!(level_set(&[0.1, 1.0], &p, CsrbfKind::WendlandC2), 0.7);
        assert_eq!(level_set(&[0.1, 1.5], &p, CsrbfKind::WendlandC2), 0.0);
        assert_eq!(level_set(&[0.9, 0.2], &p, CsrbfKind::WendlandC2), 0.0);
    }

    #[test]
    fn two_bumps_match_direct_sum() {
        let p = PalsParams::from_bumps(2, &[(0.7, 1.5, [0.1, 1.0, 0.0]), (-0.4, 2.5, [-0.2, 0.8, 0.0])])
            .unwrap();
        let psi = |s: f64| if s < 1.0 { (1.0 - s).powi(4) * (4.0 * s + 1.0) } else { 0.0 };
        for k in 0..10 {
            let x = [-0.6 + 0.13 * k as f64, 0.5 + 0.07 * k as f64];
            let r1 = ((x[0] - 0.1f64).powi(2) + (x[1] - 1.0f64).powi(2)).sqrt();
            let r2 = ((x[0] + 0.2f64).powi(2) + (x[1] - 0.8f64).powi(2)).sqrt();
            let expect = 0.7 * psi(1.5 * r1) - 0.4 * psi(2.5 * r2);
            assert!((level_set(&x, &p, CsrbfKind::WendlandC2) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn level_equal_to_threshold_gives_midpoint() {
        let cfg = PalsConfig {
            c0: 0.0,
            ..Default::default()
        };
        // alpha = 0 makes phi identically zero
        let p = PalsParams::from_bumps(2, &[(0.0, 1.0, [0.0, 1.0, 0.0])]).unwrap();
        let mu = absorption_field(&grid2(), &p, &cfg);
        assert!(mu.iter().all(|&m| (m - 0.25).abs() < 1e-15));
    }

    #[test]
    fn strongly_negative_alpha_gives_low_absorption() {
        let cfg = PalsConfig::default();
        let p = PalsParams::from_bumps(2, &[(-1e6, 0.3, [0.0, 1.0, 0.0])]).unwrap();
        let mu = absorption_field(&grid2(), &p, &cfg);
        // nodes outside the support still see H(-c0); inside, the level set is deeply negative
        let g = grid2();
        for (node, &m) in mu.iter().enumerate() {
            let x = g.point(node);
            let r = ((x[0]).powi(2) + (x[1] - 1.0).powi(2)).sqrt();
            if 0.3 * r < 0.9 {
                assert!(m - cfg.mu_low < 1e-4, "node {node}: {m}");
            }
        }
    }

    #[test]
    fn lattice_signs_and_levels() {
        let g = Grid::cube(3, 13).unwrap();
        let p = PalsParams::lattice(&g, 3, 1.0 / 0.6, 1.0, -1.0).unwrap();
        assert_eq!(p.n_params(), 135);
        let pos: Vec<usize> = (0..27).filter(|&j| p.alpha(j) > 0.0).collect();
        assert_eq!(pos.len(), 13);
        let cfg = PalsConfig::default();
        for j in 0..27 {
            let mut c = [0.0; 3];
            c.copy_from_slice(p.center(j));
            let phi = level_set(&c, &p, cfg.csrbf);
            assert_eq!(phi > cfg.c0, p.alpha(j) > 0.0);
        }
        for node in 0..g.n_nodes() {
            let x = g.point(node);
            if level_set(&x, &p, cfg.csrbf) > cfg.c0 {
                let inside = pos.iter().any(|&j| p.beta(j) * distance(&x, p.center(j)) < 1.0);
                assert!(inside);
            }
        }
    }

    #[test]
    fn alpha_derivative_at_center() {
        let g = grid2();
        let cfg = PalsConfig::default();
        let node = g.node(10, 0, 10);
        let x = g.point(node);
        let p = PalsParams::from_bumps(2, &[(0.4, 2.0, [x[0], x[1], 0.0])]).unwrap();
        let grad = absorption_gradient(&g, &p, &cfg);
        let k = grad[0].indices.iter().position(|&i| i == node).unwrap();
        let expect = (cfg.mu_high - cfg.mu_low) * cfg.heaviside_derivative(0.4 - cfg.c0);
        assert!((grad[0].values[k] - expect).abs() < 1e-14);
        // center derivatives vanish at the centre node
        assert_eq!(grad[2].values[k], 0.0);
        assert_eq!(grad[3].values[k], 0.0);
    }

    #[test]
    fn gradient_support_is_inside_bump() {
        let g = grid2();
        let p = PalsParams::from_bumps(2, &[(0.4, 3.0, [0.2, 0.9, 0.0])]).unwrap();
        let grad = absorption_gradient(&g, &p, &PalsConfig::default());
        for sv in &grad {
            for &node in &sv.indices {
                let x = g.point(node);
                assert!(3.0 * distance(&x[..2], &[0.2, 0.9]) < 1.0);
            }
        }
    }

    fn fd_check(g: &Grid, p: &PalsParams, cfg: &PalsConfig) -> f64 {
        let grad = absorption_gradient(g, p, cfg);
        let n = g.n_nodes();
        let mut worst: f64 = 0.0;
        for k in 0..p.n_params() {
            let step = 1e-6 * (1.0 + p.as_slice()[k].abs());
            let mut plus = p.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[k] += step;
            minus[k] -= step;
            let fp = absorption_field(g, &p.with_values(plus).unwrap(), cfg);
            let fm = absorption_field(g, &p.with_values(minus).unwrap(), cfg);
            let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
            let an = grad[k].to_dense(n);
            let num: f64 = fd.iter().zip(&an).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            if den > 1e-8 {
                worst = worst.max(num / den);
            } else {
                worst = worst.max(num);
            }
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_finite_differences(
            a1 in -1.0f64..1.0, a2 in -1.0f64..1.0,
            b1 in 1.0f64..4.0, b2 in 1.0f64..4.0,
            cx in -0.5f64..0.5, cz in 0.5f64..1.5,
        ) {
            let g = Grid::cube(2, 15).unwrap();
            let p = PalsParams::from_bumps(2, &[(a1, b1, [cx, cz, 0.0]), (a2, b2, [-cx, 2.0 - cz, 0.0])]).unwrap();
            let err = fd_check(&g, &p, &PalsConfig::default());
            prop_assert!(err <= 1e-5, "relative error {err}");
        }

        #[test]
        fn field_is_bounded_and_finite(
            a in -1e3f64..1e3, b in 0.01f64..50.0, cx in -3.0f64..3.0, cz in -1.0f64..3.0,
        ) {
            let g = Grid::cube(2, 9).unwrap();
            let cfg = PalsConfig::default();
            let p = PalsParams::from_bumps(2, &[(a, b, [cx, cz, 0.0])]).unwrap();
            for m in absorption_field(&g, &p, &cfg) {
                prop_assert!(m.is_finite() && m >= cfg.mu_low && m <= cfg.mu_high);
            }
            for sv in absorption_gradient(&g, &p, &cfg) {
                prop_assert!(sv.values.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        assert!(PalsParams::new(3, vec![0.0; 9]).is_err());
        assert!(PalsParams::new(2, vec![0.0; 8]).is_ok());
        let bad = PalsConfig {
            eps: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let p = PalsParams::new(2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(!p.is_admissible());
    }
}
