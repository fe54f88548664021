//! Canonical-form distributions and the arithmetic that keeps them closed.
//!
//! A canonical form is `D = mean + sum_i coeffs[i] * X_i + noise * R` where the
//! `X_i` are the shared independent sources of a [`BasisSet`] and `R` is a unit
//! normal. Weighted sums are exact on the `(mean, coeffs)` part; the residual
//! weights combine in quadrature.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalForm {
    /// Mean value `a0`.
    pub mean: f64,
    /// Source weights `a_1..a_d`.
    pub coeffs: Vec<f64>,
    /// Standard deviation `a_r` of the Gaussian residual.
    pub noise: f64,
}

impl CanonicalForm {
    pub fn new(mean: f64, coeffs: Vec<f64>, noise: f64) -> Self {
        Self { mean, coeffs, noise }
    }

    /// The all-zero form, fixed point of [`stat_relu`].
    pub fn zero(dim: usize) -> Self {
        Self { mean: 0.0, coeffs: vec![0.0; dim], noise: 0.0 }
    }

    /// A deterministic constant (no source or residual weight).
    pub fn constant(value: f64, dim: usize) -> Self {
        Self { mean: value, coeffs: vec![0.0; dim], noise: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_valid(&self) -> bool {
        self.mean.is_finite()
            && self.noise.is_finite()
            && self.noise >= 0.0
            && self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Value at one outcome of the sources, residual excluded.
    pub fn evaluate(&self, source_values: &[f64]) -> f64 {
        self.mean + self.coeffs.iter().zip(source_values).map(|(a, x)| a * x).sum::<f64>()
    }
}

/// Exact weighted sum: `bias + sum_k w_k * D_k` in canonical form.
pub fn weighted_sum(terms: &[(f64, &CanonicalForm)], bias: f64) -> Result<CanonicalForm> {
    let dim = match terms.first() {
        Some((_, cf)) => cf.dim(),
        None => return Err(Error::dim("weighted_sum needs at least one term")),
    };
    let mut out = CanonicalForm::constant(bias, dim);
    let mut noise_sq = 0.0;
    for (w, cf) in terms {
        if cf.dim() != dim {
            return Err(Error::dim(format!(
                "weighted_sum term has {} coefficients, expected {dim}",
                cf.dim()
            )));
        }
        out.mean += w * cf.mean;
        for (o, c) in out.coeffs.iter_mut().zip(&cf.coeffs) {
            *o += w * c;
        }
        noise_sq += (w * cf.noise).powi(2);
    }
    out.noise = noise_sq.sqrt();
    Ok(out)
}

/// Mean-gated maximum: the argument with the larger mean, `lhs` on ties.
pub fn stat_max(lhs: &CanonicalForm, rhs: &CanonicalForm) -> Result<CanonicalForm> {
    if lhs.dim() != rhs.dim() {
        return Err(Error::dim(format!(
            "stat_max operands have {} and {} coefficients",
            lhs.dim(),
            rhs.dim()
        )));
    }
    Ok(if rhs.mean > lhs.mean { rhs.clone() } else { lhs.clone() })
}

/// Max against the zero form. Returns the result and the gate bit.
pub fn stat_relu(cf: &CanonicalForm) -> (CanonicalForm, bool) {
    if cf.mean > 0.0 {
        (cf.clone(), true)
    } else {
        (CanonicalForm::zero(cf.dim()), false)
    }
}

/// Shared independent sources for one (snippet, scale) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    dim: usize,
    len: usize,
    /// Row-major `dim x len`; row `i` is source `X_i` over the outcome slots.
    sources: Vec<f64>,
    column_means: Vec<f64>,
    pub scale_id: usize,
}

impl BasisSet {
    pub fn new(dim: usize, len: usize, sources: Vec<f64>, column_means: Vec<f64>, scale_id: usize) -> Result<Self> {
        if sources.len() != dim * len || column_means.len() != len {
            return Err(Error::dim(format!(
                "basis expects {dim}x{len} sources and {len} column means, got {} and {}",
                sources.len(),
                column_means.len()
            )));
        }
        Ok(Self { dim, len, sources, column_means, scale_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Outcome count per patch (`n^2 * t`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sources(&self) -> &[f64] {
        &self.sources
    }

    pub fn source(&self, i: usize) -> &[f64] {
        &self.sources[i * self.len..(i + 1) * self.len]
    }

    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }

    /// Source values `X_1..X_d` at outcome slot `j`.
    pub fn outcome(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.sources[i * self.len + j]).collect()
    }
}

/// Where a grid came from: the volume it collapses and the tiling used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub volume_dims: [usize; 4],
    pub stride: usize,
    pub patch: usize,
    pub span: usize,
}

/// A collapsed `[gx, gy, z]` grid of canonical forms per channel.
#[derive(Debug, Clone)]
pub struct CanonicalFormGrid {
    channels: usize,
    dims: [usize; 3],
    basis: Arc<BasisSet>,
    pub geometry: GridGeometry,
    means: Vec<f64>,
    coeffs: Vec<f64>,
    noise: Vec<f64>,
}

impl CanonicalFormGrid {
    pub fn zeros(channels: usize, dims: [usize; 3], basis: Arc<BasisSet>, geometry: GridGeometry) -> Self {
        let cells = channels * dims[0] * dims[1] * dims[2];
        Self {
            channels,
            dims,
            means: vec![0.0; cells],
            coeffs: vec![0.0; cells * basis.dim()],
            noise: vec![0.0; cells],
            basis,
            geometry,
        }
    }

    /// Builds a grid from flat per-cell arrays in `[channel][z][y][x]` order.
    pub fn from_parts(
        channels: usize,
        dims: [usize; 3],
        basis: Arc<BasisSet>,
        geometry: GridGeometry,
        means: Vec<f64>,
        coeffs: Vec<f64>,
        noise: Vec<f64>,
    ) -> Result<Self> {
        let cells = channels * dims[0] * dims[1] * dims[2];
        if means.len() != cells || noise.len() != cells || coeffs.len() != cells * basis.dim() {
            return Err(Error::dim("grid arrays do not match channel and cell counts"));
        }
        if noise.iter().any(|&s| s < 0.0) {
            return Err(Error::Data("negative residual weight in grid".into()));
        }
        Ok(Self { channels, dims, basis, geometry, means, coeffs, noise })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[gx, gy, z]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn index(&self, channel: usize, x: usize, y: usize, z: usize) -> usize {
        ((channel * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn cell(&self, channel: usize, x: usize, y: usize, z: usize) -> CanonicalForm {
        let i = self.index(channel, x, y, z);
        let d = self.basis.dim();
        CanonicalForm {
            mean: self.means[i],
            coeffs: self.coeffs[i * d..(i + 1) * d].to_vec(),
            noise: self.noise[i],
        }
    }

    pub fn set_cell(&mut self, channel: usize, x: usize, y: usize, z: usize, cf: &CanonicalForm) -> Result<()> {
        let d = self.basis.dim();
        if cf.dim() != d {
            return Err(Error::dim(format!("cell has {} coefficients, grid basis has {d}", cf.dim())));
        }
        let i = self.index(channel, x, y, z);
        self.means[i] = cf.mean;
        self.coeffs[i * d..(i + 1) * d].copy_from_slice(&cf.coeffs);
        self.noise[i] = cf.noise;
        Ok(())
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// Cells `x, y` of slice `z` of one channel, row-major.
    pub fn slice_range(&self, channel: usize, z: usize) -> std::ops::Range<usize> {
        let start = self.index(channel, 0, 0, z);
        start..start + self.dims[0] * self.dims[1]
    }
}

/// Mixed outcomes of a grid: `[channel][z][y][x][j]` with `j` over the basis length.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub len: usize,
    pub values: Vec<f64>,
}

impl PatchTensor {
    pub fn patch(&self, channel: usize, x: usize, y: usize, z: usize) -> &[f64] {
        let cell = ((channel * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x;
        &self.values[cell * self.len..(cell + 1) * self.len]
    }
}

/// Plugs the basis outcomes into every cell: `mean + coeffs . X(j)`, plus a
/// seeded `noise * N(0, 1)` draw when `include_noise` is set.
pub fn mix(grid: &CanonicalFormGrid, include_noise: bool, rng_seed: Option<u64>) -> PatchTensor {
    let basis = grid.basis();
    let (d, len) = (basis.dim(), basis.len());
    let cells = grid.channels * grid.cell_count();
    let mut values = vec![0.0; cells * len];
    for (row, &m) in values.chunks_mut(len).zip(&grid.means) {
        row.fill(m);
    }
    if d > 0 {
        linalg::gemm_strided(
            cells,
            d,
            len,
            1.0,
            &grid.coeffs,
            d as isize,
            1,
            basis.sources(),
            len as isize,
            1,
            1.0,
            &mut values,
            len as isize,
            1,
        );
    }
    if include_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.unwrap_or(0));
        for (row, &s) in values.chunks_mut(len).zip(&grid.noise) {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += s * z;
            }
        }
    }
    PatchTensor { channels: grid.channels, dims: grid.dims, len, values }
}
