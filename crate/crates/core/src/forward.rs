//! Finite-difference discretization of the frequency-domain diffusion model on a box.
//!
//! The box is `-a < x1 < a`, `-b < x2 < b`, `0 < x3 < c` with homogeneous Dirichlet
//! conditions on the lateral faces and Robin conditions `0.25 phi + (D/2) d phi/d xi = 0`
//! on the top (`x3 = 0`) and bottom (`x3 = c`) faces. In 2D the lateral axis is `x1`
//! and the depth axis plays the role of `x3`.
//!
//! Rows of the interior stencil are multiplied by `h^2`; Robin rows are not. Nodes on
//! the two Robin faces are numbered first, followed by the remaining nodes in
//! lexicographic order, so the face block of the operator is diagonal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    nx: usize,
    ny: usize,
    nz: usize,
    h: f64,
    a: f64,
    b: f64,
    c: f64,
}

/// Builds a uniform grid. `nodes_per_axis` and `extents` are `[nx, nz]`, `[a, c]` in 2D
/// and `[nx, ny, nz]`, `[a, b, c]` in 3D, where `a`, `b` are half-widths and `c` the depth.
pub fn build_grid(dim: usize, nodes_per_axis: &[usize], extents: &[f64]) -> Result<Grid> {
    if dim != 2 && dim != 3 {
        return Err(Error::config(format!("dimension must be 2 or 3, got {dim}")));
    }
    if nodes_per_axis.len() != dim || extents.len() != dim {
        return Err(Error::config(format!(
            "expected {dim} node counts and {dim} extents, got {} and {}",
            nodes_per_axis.len(),
            extents.len()
        )));
    }
    if nodes_per_axis.iter().any(|&n| n < 3) {
        return Err(Error::config("every axis needs at least 3 nodes"));
    }
    if extents.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::config("extents must be positive and finite"));
    }
    let nx = nodes_per_axis[0];
    let a = extents[0];
    let h = 2.0 * a / (nx - 1) as f64;
    let (ny, b) = if dim == 3 {
        (nodes_per_axis[1], extents[1])
    } else {
        (1, 0.0)
    };
    let nz = nodes_per_axis[dim - 1];
    let c = extents[dim - 1];
    let close = |other: f64| libm::fabs(other - h) <= 1e-10 * h;
    if dim == 3 && !close(2.0 * b / (ny - 1) as f64) {
        return Err(Error::config(format!(
            "x2 spacing {} differs from x1 spacing {h}",
            2.0 * b / (ny - 1) as f64
        )));
    }
    if !close(c / (nz - 1) as f64) {
        return Err(Error::config(format!(
            "depth spacing {} differs from lateral spacing {h}",
            c / (nz - 1) as f64
        )));
    }
    Ok(Grid {
        dim,
        nx,
        ny,
        nz,
        h,
        a,
        b,
        c,
    })
}

impl Grid {
    /// Grid with `n` nodes per axis on the box with half-widths 1 and depth 2.
    pub fn cube(dim: usize, n: usize) -> Result<Grid> {
        let nodes = vec![n; dim];
        let mut ext = vec![1.0; dim];
        ext[dim - 1] = 2.0;
        build_grid(dim, &nodes, &ext)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn nz(&self) -> usize {
        self.nz
    }
    pub fn extents(&self) -> (f64, f64, f64) {
        (self.a, self.b, self.c)
    }
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn node(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    #[inline]
    pub fn indices(&self, node: usize) -> (usize, usize, usize) {
        let ix = node % self.nx;
        let r = node / self.nx;
        (ix, r % self.ny, r / self.ny)
    }

    /// Physical coordinates of a node. In 2D the result is `[x1, x3, 0]`.
    pub fn point(&self, node: usize) -> [f64; 3] {
        let (ix, iy, iz) = self.indices(node);
        let x = -self.a + ix as f64 * self.h;
        let z = iz as f64 * self.h;
        if self.dim == 3 {
            [x, -self.b + iy as f64 * self.h, z]
        } else {
            [x, z, 0.0]
        }
    }

    /// Node on `x3 = 0` or `x3 = c`.
    pub fn on_robin_face(&self, node: usize) -> bool {
        let (_, _, iz) = self.indices(node);
        iz == 0 || iz == self.nz - 1
    }

    /// Node on a lateral (Dirichlet) face.
    pub fn on_lateral_face(&self, node: usize) -> bool {
        let (ix, iy, _) = self.indices(node);
        ix == 0 || ix == self.nx - 1 || (self.dim == 3 && (iy == 0 || iy == self.ny - 1))
    }

    /// Top-face nodes that are not on a lateral face.
    pub fn top_face_nodes(&self) -> Vec<usize> {
        (0..self.nx * self.ny).filter(|&n| !self.on_lateral_face(n)).collect()
    }

    pub fn bottom_face_nodes(&self) -> Vec<usize> {
        let off = self.nx * self.ny * (self.nz - 1);
        self.top_face_nodes().into_iter().map(|n| n + off).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediumParams {
    pub diffusion: f64,
    pub light_speed: f64,
    pub mu_background: f64,
    pub heterogeneity_sigma: f64,
    pub rng_seed: u64,
}

impl Default for MediumParams {
    fn default() -> Self {
        MediumParams {
            diffusion: 1.0,
            light_speed: 1.0,
            mu_background: 0.05,
            heterogeneity_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl MediumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusion > 0.0) {
            return Err(Error::config(format!("diffusion must be positive, got {}", self.diffusion)));
        }
        if !(self.light_speed > 0.0) {
            return Err(Error::config(format!(
                "speed of light must be positive, got {}",
                self.light_speed
            )));
        }
        if !(self.mu_background >= 0.0) || !(self.heterogeneity_sigma >= 0.0) {
            return Err(Error::config("absorption and heterogeneity must be nonnegative"));
        }
        Ok(())
    }

    /// Background absorption per node (grid order): `mu_background` plus i.i.d.
    /// Gaussian heterogeneity, clipped at zero.
    pub fn background_field(&self, grid: &Grid) -> Vec<f64> {
        let mut out = vec![self.mu_background; grid.n_nodes()];
        if self.heterogeneity_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            rng.set_stream(0x6865_7465_726f);
            for v in out.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + self.heterogeneity_sigma * g).max(0.0);
            }
        }
        out
    }
}

/// Sources on the top face and detectors on the bottom face, as grid node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDetectorLayout {
    pub source_nodes: Vec<usize>,
    pub detector_nodes: Vec<usize>,
}

impl SourceDetectorLayout {
    /// Regularly spaced sources and detectors. In 3D the counts must be perfect squares.
    pub fn regular(grid: &Grid, n_sources: usize, n_detectors: usize) -> Result<Self> {
        let top = face_positions(grid, n_sources)?;
        let bottom = face_positions(grid, n_detectors)?;
        let off = grid.nx * grid.ny * (grid.nz - 1);
        let layout = SourceDetectorLayout {
            source_nodes: top,
            detector_nodes: bottom.into_iter().map(|n| n + off).collect(),
        };
        layout.validate(grid)?;
        Ok(layout)
    }

    pub fn n_sources(&self) -> usize {
        self.source_nodes.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.detector_nodes.len()
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.source_nodes.is_empty() || self.detector_nodes.is_empty() {
            return Err(Error::config("layout needs at least one source and one detector"));
        }
        check_face(grid, &self.source_nodes, 0, "source")?;
        check_face(grid, &self.detector_nodes, grid.nz - 1, "detector")
    }
}

fn check_face(grid: &Grid, nodes: &[usize], iz_face: usize, what: &str) -> Result<()> {
    for (k, &n) in nodes.iter().enumerate() {
        if n >= grid.n_nodes() {
            return Err(Error::config(format!("{what} {k}: node {n} out of range")));
        }
        let (_, _, iz) = grid.indices(n);
        if iz != iz_face {
            return Err(Error::config(format!("{what} {k}: node {n} is not on the expected face")));
        }
        if grid.on_lateral_face(n) {
            return Err(Error::config(format!("{what} {k}: node {n} lies on a Dirichlet edge")));
        }
        if nodes[..k].contains(&n) {
            return Err(Error::config(format!("{what} {k}: node {n} listed twice")));
        }
    }
    Ok(())
}

fn spread(count: usize, interior: usize) -> Vec<usize> {
    (0..count)
        .map(|k| 1 + ((2 * k + 1) * interior) / (2 * count))
        .collect()
}

fn face_positions(grid: &Grid, count: usize) -> Result<Vec<usize>> {
    if grid.dim == 2 {
        if count == 0 || count > grid.nx - 2 {
            return Err(Error::config(format!(
                "cannot place {count} positions on a face with {} free nodes",
                grid.nx - 2
            )));
        }
        Ok(spread(count, grid.nx - 2))
    } else {
        let m = libm::round(libm::sqrt(count as f64)) as usize;
        if m * m != count || m == 0 || m > grid.nx - 2 || m > grid.ny - 2 {
            return Err(Error::config(format!(
                "3D layouts need a square count fitting the face, got {count}"
            )));
        }
        let xs = spread(m, grid.nx - 2);
        let ys = spread(m, grid.ny - 2);
        Ok(ys
            .iter()
            .flat_map(|&iy| xs.iter().map(move |&ix| (ix, iy)))
            .map(|(ix, iy)| grid.node(ix, iy, 0))
            .collect())
    }
}

/// The discretized operator family `(i omega / nu) E + A0 + diag(a1 .* mu)` with
/// source and detector matrices, all in face-first ordering.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub n: usize,
    /// Number of leading (Robin face) rows; the corresponding block of `A0` is diagonal.
    pub n_face: usize,
    pub a0: CsrMatrix,
    pub(crate) a0_off: CsrMatrix,
    pub(crate) a0_diag: Vec<f64>,
    /// Diagonal of `E`: 0 on face rows, 1 elsewhere.
    pub e_diag: Vec<f64>,
    /// Factor mapping an absorption value at a node to the diagonal of `A1`.
    pub a1_scale: Vec<f64>,
    /// `(state index, value)` per source column.
    pub sources: Vec<(usize, f64)>,
    /// State index per detector row (unit weight).
    pub detectors: Vec<usize>,
    pub light_speed: f64,
    pub diffusion: f64,
    pub h: f64,
    /// state index -> grid node
    pub node_of_state: Vec<usize>,
    /// grid node -> state index
    pub state_of_node: Vec<usize>,
}

pub fn assemble_system(
    grid: &Grid,
    medium: &MediumParams,
    layout: &SourceDetectorLayout,
    mu_field: &[f64],
) -> Result<SystemMatrices> {
    medium.validate()?;
    layout.validate(grid)?;
    let n = grid.n_nodes();
    if mu_field.len() != n {
        return Err(Error::config(format!(
            "absorption field has {} entries for {n} nodes",
            mu_field.len()
        )));
    }
    if mu_field.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::config("absorption field must be finite and nonnegative"));
    }

    let layer = grid.nx * grid.ny;
    let mut node_of_state = Vec::with_capacity(n);
    node_of_state.extend(0..layer);
    node_of_state.extend(layer * (grid.nz - 1)..n);
    node_of_state.extend(layer..layer * (grid.nz - 1));
    let mut state_of_node = vec![0usize; n];
    for (s, &node) in node_of_state.iter().enumerate() {
        state_of_node[node] = s;
    }
    let n_face = 2 * layer;

    let d = medium.diffusion;
    let h = grid.h;
    let robin_diag = 0.25 + d / (2.0 * h);
    let robin_off = -d / (2.0 * h);
    let centre = 2.0 * grid.dim as f64 * d;

    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(n * (2 * grid.dim + 1));
    let mut e_diag = vec![0.0; n];
    let mut a1_scale = vec![0.0; n];
    for node in 0..n {
        let s = state_of_node[node];
        let (ix, iy, iz) = grid.indices(node);
        let lateral = grid.on_lateral_face(node);
        if grid.on_robin_face(node) {
            trip.push((s, s, robin_diag));
            if !lateral {
                let inner = if iz == 0 {
                    grid.node(ix, iy, 1)
                } else {
                    grid.node(ix, iy, grid.nz - 2)
                };
                trip.push((s, state_of_node[inner], robin_off));
            }
            continue;
        }
        e_diag[s] = 1.0;
        if lateral {
            trip.push((s, s, centre));
            continue;
        }
        a1_scale[s] = h * h;
        trip.push((s, s, centre + h * h * mu_field[node]));
        let mut neighbours = vec![
            grid.node(ix - 1, iy, iz),
            grid.node(ix + 1, iy, iz),
            grid.node(ix, iy, iz - 1),
            grid.node(ix, iy, iz + 1),
        ];
        if grid.dim == 3 {
            neighbours.push(grid.node(ix, iy - 1, iz));
            neighbours.push(grid.node(ix, iy + 1, iz));
        }
        for nb in neighbours {
            // eliminated Dirichlet unknowns contribute nothing
            if grid.on_lateral_face(nb) {
                continue;
            }
            trip.push((s, state_of_node[nb], -d));
        }
    }
    let a0 = CsrMatrix::from_triplets(n, n, &trip);
    let a0_off = a0.without_diagonal();
    let a0_diag = a0.diagonal();

    let src_val = 1.0 / libm::pow(h, grid.dim as f64);
    let sources = layout
        .source_nodes
        .iter()
        .map(|&node| {
            let (ix, iy, _) = grid.indices(node);
            (state_of_node[grid.node(ix, iy, 1)], src_val)
        })
        .collect();
    let detectors = layout.detector_nodes.iter().map(|&node| state_of_node[node]).collect();

    Ok(SystemMatrices {
        n,
        n_face,
        a0,
        a0_off,
        a0_diag,
        e_diag,
        a1_scale,
        sources,
        detectors,
        light_speed: medium.light_speed,
        diffusion: d,
        h,
        node_of_state,
        state_of_node,
    })
}

impl SystemMatrices {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.detectors.len()
    }

    /// Diagonal of `A1` (state order) for an absorption field given in grid order.
    pub fn a1_diag(&self, field: &[f64]) -> Vec<f64> {
        self.a1_scale
            .iter()
            .zip(&self.node_of_state)
            .map(|(&s, &node)| s * field[node])
            .collect()
    }

    /// Dense `n x n_s` source matrix.
    pub fn b_dense(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n, self.n_sources());
        for (k, &(s, v)) in self.sources.iter().enumerate() {
            b[(s, k)] = v;
        }
        b
    }

    /// Dense `n_d x n` detector matrix.
    pub fn c_dense(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.n_detectors(), self.n);
        for (k, &s) in self.detectors.iter().enumerate() {
            c[(k, s)] = 1.0;
        }
        c
    }

    /// `C X` for a block of state vectors.
    pub fn observe(&self, x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.n_detectors(), x.ncols(), |d, j| x[(self.detectors[d], j)])
    }

    /// `B S` for a real sketch `S` (n_s x l).
    pub fn sources_times(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, s.ncols());
        for (k, &(row, v)) in self.sources.iter().enumerate() {
            for j in 0..s.ncols() {
                out[(row, j)] += v * s[(k, j)];
            }
        }
        out
    }

    /// `C^T T` for a real sketch `T` (n_d x l).
    pub fn detectors_transpose_times(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, t.ncols());
        for (k, &row) in self.detectors.iter().enumerate() {
            for j in 0..t.ncols() {
                out[(row, j)] += t[(k, j)];
            }
        }
        out
    }

    /// The operator `(i omega / nu) E + A0 + diag(p_diag)`.
    pub fn shifted_operator(&self, omega: f64, p_diag: &[f64]) -> ShiftedSystem<'_> {
        shifted_operator(self, omega, p_diag)
    }
}

pub fn shifted_operator<'a>(sys: &'a SystemMatrices, omega: f64, p_diag: &[f64]) -> ShiftedSystem<'a> {
    assert_eq!(p_diag.len(), sys.n, "parameter diagonal has wrong length");
    let shift = omega / sys.light_speed;
    let diag = (0..sys.n)
        .map(|i| Complex64::new(sys.a0_diag[i] + p_diag[i], shift * sys.e_diag[i]))
        .collect();
    ShiftedSystem {
        off: &sys.a0_off,
        diag,
        n_lead: sys.n_face,
    }
}

/// A sparse operator with real off-diagonal part and complex diagonal, whose leading
/// `n_lead x n_lead` block is diagonal.
#[derive(Debug, Clone)]
pub struct ShiftedSystem<'a> {
    pub(crate) off: &'a CsrMatrix,
    pub(crate) diag: Vec<Complex64>,
    pub(crate) n_lead: usize,
}

impl<'a> ShiftedSystem<'a> {
    /// Generic constructor; `off` must have an empty diagonal.
    pub fn from_parts(off: &'a CsrMatrix, diag: Vec<Complex64>, n_lead: usize) -> Result<Self> {
        let n = diag.len();
        if off.nrows() != n || off.ncols() != n {
            return Err(Error::Structure(format!(
                "off-diagonal part is {}x{}, diagonal has {n} entries",
                off.nrows(),
                off.ncols()
            )));
        }
        if off.diagonal().iter().any(|&v| v != 0.0) {
            return Err(Error::Structure("off-diagonal part has diagonal entries".into()));
        }
        if n_lead > n {
            return Err(Error::Structure("leading block larger than the operator".into()));
        }
        Ok(ShiftedSystem { off, diag, n_lead })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn n_lead(&self) -> usize {
        self.n_lead
    }

    pub fn diagonal(&self) -> &[Complex64] {
        &self.diag
    }

    pub fn off_diagonal(&self) -> &CsrMatrix {
        self.off
    }

    pub fn is_real(&self) -> bool {
        self.diag.iter().all(|z| z.im == 0.0)
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::default(); self.dim()];
        self.off.mul_vec(x, &mut y);
        for ((yi, &d), &xi) in y.iter_mut().zip(&self.diag).zip(x) {
            *yi += d * xi;
        }
        y
    }

    pub fn apply_transpose(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::default(); self.dim()];
        for i in 0..self.dim() {
            let (cols, vals) = self.off.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += x[i] * v;
            }
        }
        for ((yi, &d), &xi) in y.iter_mut().zip(&self.diag).zip(x) {
            *yi += d * xi;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = self.off.to_dense().map(|v| Complex64::new(v, 0.0));
        for (i, &d) in self.diag.iter().enumerate() {
            m[(i, i)] += d;
        }
        m
    }
}
