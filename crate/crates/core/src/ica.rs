//! Shared-basis decomposition of patch samples.
//!
//! Rows of the sample matrix are patches (one per grid position), columns are
//! outcome slots inside a patch. Each row is modelled as
//! `mean + column_means + coefficients . sources + residual`, where the sources
//! are `d` unit-variance signals over the outcome slots found by PCA whitening
//! followed by symmetric FastICA with a `tanh` contrast.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::canonical::BasisSet;
use crate::error::{Error, Result};
use crate::linalg;

/// Minimum number of patch rows per basis dimension.
pub const SAMPLES_PER_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decomposition {
    /// Whitening followed by the FastICA rotation.
    Ica,
    /// Whitening only; sources are the principal directions.
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub method: Decomposition,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self { seed: 0, max_iter: 500, tol: 1e-6, method: Decomposition::Ica }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcaFit {
    pub basis: BasisSet,
    /// Row-major `P x d` source weights per patch.
    pub coefficients: Vec<f64>,
    /// Per-patch mean (`a0`).
    pub means: Vec<f64>,
    /// Per-patch residual RMS (`a_r`).
    pub residual_sigma: Vec<f64>,
    pub explained_fraction: f64,
    /// False when FastICA hit `max_iter`; the whitened basis is still exact.
    pub converged: bool,
    pub iterations: usize,
}

impl IcaFit {
    pub fn rows(&self) -> usize {
        self.means.len()
    }

    /// Reconstruction of row `p` without the residual.
    pub fn reconstruct_row(&self, p: usize) -> Vec<f64> {
        let d = self.basis.dim();
        let len = self.basis.len();
        let coeffs = &self.coefficients[p * d..(p + 1) * d];
        (0..len)
            .map(|j| {
                let mut v = self.means[p] + self.basis.column_means()[j];
                for (i, a) in coeffs.iter().enumerate() {
                    v += a * self.basis.source(i)[j];
                }
                v
            })
            .collect()
    }
}

/// PCA-whitened intermediate: `centered ~= coefficients * sources`.
pub(crate) struct Whitened {
    pub means: Vec<f64>,
    pub column_means: Vec<f64>,
    pub centered: Vec<f64>,
    /// `P x d`, orthogonal zero-mean columns.
    pub coefficients: Vec<f64>,
    /// `d x L`, unit variance, mutually uncorrelated rows.
    pub sources: Vec<f64>,
}

pub(crate) fn whiten(samples: &[f64], rows: usize, cols: usize, dim: usize) -> Whitened {
    let mut centered = samples.to_vec();
    let mut means = Vec::with_capacity(rows);
    for row in centered.chunks_mut(cols) {
        let m = row.iter().sum::<f64>() / cols as f64;
        row.iter_mut().for_each(|v| *v -= m);
        means.push(m);
    }
    let mut column_means = vec![0.0; cols];
    for row in centered.chunks(cols) {
        for (c, v) in column_means.iter_mut().zip(row) {
            *c += v;
        }
    }
    column_means.iter_mut().for_each(|c| *c /= rows as f64);
    for row in centered.chunks_mut(cols) {
        for (v, c) in row.iter_mut().zip(&column_means) {
            *v -= c;
        }
    }

    let (coefficients, sources) = match dual_whiten(&centered, rows, cols, dim) {
        Some(w) => w,
        None => primal_whiten(&centered, rows, cols, dim),
    };
    Whitened { means, column_means, centered, coefficients, sources }
}

/// Whitening from the `cols x cols` Gram.
fn primal_whiten(centered: &[f64], rows: usize, cols: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let gram = linalg::gram(rows, cols, centered);
    let (_, vecs) = linalg::sym_eigen_desc(cols, &gram);
    let scale = (cols as f64).sqrt();
    // top-d eigenvectors as a cols x dim block
    let mut top = vec![0.0; cols * dim];
    for r in 0..cols {
        top[r * dim..(r + 1) * dim].copy_from_slice(&vecs[r * cols..r * cols + dim]);
    }
    let mut coefficients = linalg::matmul(rows, cols, dim, centered, &top);
    coefficients.iter_mut().for_each(|v| *v /= scale);
    let mut sources = vec![0.0; dim * cols];
    for i in 0..dim {
        for j in 0..cols {
            sources[i * cols + j] = top[j * dim + i] * scale;
        }
    }
    (coefficients, sources)
}

/// Same whitening from the smaller `rows x rows` Gram when there are fewer
/// rows than columns; `None` when a kept direction has (near) zero energy.
fn dual_whiten(centered: &[f64], rows: usize, cols: usize, dim: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if rows >= cols {
        return None;
    }
    let mut outer = vec![0.0; rows * rows];
    linalg::gemm_strided(
        rows, cols, rows, 1.0, centered, cols as isize, 1, centered, 1, cols as isize, 0.0, &mut outer, rows as isize, 1,
    );
    let (vals, vecs) = linalg::sym_eigen_desc(rows, &outer);
    let floor = vals[0].max(f64::MIN_POSITIVE) * 1e-12;
    if vals[..dim].iter().any(|&v| v <= floor) {
        return None;
    }
    let scale = (cols as f64).sqrt();
    let mut coefficients = vec![0.0; rows * dim];
    let mut sources = vec![0.0; dim * cols];
    for i in 0..dim {
        let sigma = vals[i].sqrt();
        for p in 0..rows {
            coefficients[p * dim + i] = vecs[p * rows + i] * sigma / scale;
        }
        // right singular vector C^T u / sigma
        let src = &mut sources[i * cols..(i + 1) * cols];
        for p in 0..rows {
            let u = vecs[p * rows + i] / sigma;
            for (s, c) in src.iter_mut().zip(&centered[p * cols..(p + 1) * cols]) {
                *s += u * c;
            }
        }
        src.iter_mut().for_each(|s| *s *= scale);
    }
    Some((coefficients, sources))
}

fn symmetric_decorrelation(dim: usize, w: &[f64]) -> Vec<f64> {
    let mut wwt = vec![0.0; dim * dim];
    linalg::gemm_strided(
        dim, dim, dim, 1.0, w, dim as isize, 1, w, 1, dim as isize, 0.0, &mut wwt, dim as isize, 1,
    );
    let inv_sqrt = linalg::sym_inv_sqrt(dim, &wwt);
    linalg::matmul(dim, dim, dim, &inv_sqrt, w)
}

/// Symmetric FastICA on whitened `dim x len` data; returns the orthogonal
/// rotation, the iteration count and the convergence flag.
fn fastica_rotation(white: &[f64], dim: usize, len: usize, config: &IcaConfig) -> (Vec<f64>, usize, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<f64> = (0..dim * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut w = symmetric_decorrelation(dim, &init);
    let inv_len = 1.0 / len as f64;
    let mut g = vec![0.0; dim * len];
    let mut gprime_mean = vec![0.0; dim];
    for iter in 1..=config.max_iter {
        g.fill(0.0);
        linalg::gemm_strided(
            dim, dim, len, 1.0, &w, dim as isize, 1, white, len as isize, 1, 0.0, &mut g, len as isize, 1,
        );
        for (row, gp) in g.chunks_mut(len).zip(gprime_mean.iter_mut()) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                let t = v.tanh();
                *v = t;
                acc += 1.0 - t * t;
            }
            *gp = acc * inv_len;
        }
        // g(WZ) Z^T / L - diag(E[g']) W
        let mut next = vec![0.0; dim * dim];
        linalg::gemm_strided(
            dim, len, dim, inv_len, &g, len as isize, 1, white, 1, len as isize, 0.0, &mut next, dim as isize, 1,
        );
        for i in 0..dim {
            for k in 0..dim {
                next[i * dim + k] -= gprime_mean[i] * w[i * dim + k];
            }
        }
        let next = symmetric_decorrelation(dim, &next);
        let mut lim = 0.0f64;
        for i in 0..dim {
            let dot: f64 = (0..dim).map(|k| next[i * dim + k] * w[i * dim + k]).sum();
            lim = lim.max((dot.abs() - 1.0).abs());
        }
        w = next;
        if lim < config.tol {
            return (w, iter, true);
        }
    }
    (w, config.max_iter, false)
}

/// Fits `dim` shared sources to a `rows x cols` sample matrix.
pub fn ica_fit(samples: &[f64], rows: usize, cols: usize, dim: usize, config: &IcaConfig) -> Result<IcaFit> {
    if samples.len() != rows * cols {
        return Err(Error::dim(format!("sample buffer has {} values, expected {rows}x{cols}", samples.len())));
    }
    if dim == 0 {
        return Err(Error::config("basis dimension must be at least 1"));
    }
    if dim > rows.min(cols) {
        return Err(Error::Rank(format!("basis dimension {dim} exceeds min({rows}, {cols})")));
    }
    if rows < SAMPLES_PER_DIM * dim {
        return Err(Error::config(format!(
            "{rows} patch samples is below the floor of {} for d = {dim}",
            SAMPLES_PER_DIM * dim
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in ICA samples".into()));
    }

    let white = whiten(samples, rows, cols, dim);
    let (rotation, iterations, converged) = match config.method {
        Decomposition::Ica => fastica_rotation(&white.sources, dim, cols, config),
        Decomposition::Pca => {
            let mut eye = vec![0.0; dim * dim];
            (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
            (eye, 0, true)
        }
    };
    let mut sources = linalg::matmul(dim, dim, cols, &rotation, &white.sources);
    // coefficients = B W^T
    let mut coefficients = vec![0.0; rows * dim];
    linalg::gemm_strided(
        rows, dim, dim, 1.0, &white.coefficients, dim as isize, 1, &rotation, 1, dim as isize, 0.0,
        &mut coefficients, dim as isize, 1,
    );

    // order sources by the variance they carry
    let mut power: Vec<(usize, f64)> =
        (0..dim).map(|i| (i, (0..rows).map(|p| coefficients[p * dim + i].powi(2)).sum())).collect();
    power.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    if power.iter().enumerate().any(|(k, (i, _))| k != *i) {
        let old_s = sources.clone();
        let old_c = coefficients.clone();
        for (k, &(i, _)) in power.iter().enumerate() {
            sources[k * cols..(k + 1) * cols].copy_from_slice(&old_s[i * cols..(i + 1) * cols]);
            for p in 0..rows {
                coefficients[p * dim + k] = old_c[p * dim + i];
            }
        }
    }

    let mut residual = white.centered.clone();
    linalg::gemm_strided(
        rows, dim, cols, -1.0, &coefficients, dim as isize, 1, &sources, cols as isize, 1, 1.0,
        &mut residual, cols as isize, 1,
    );
    let residual_sigma: Vec<f64> = residual
        .chunks(cols)
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / cols as f64).sqrt())
        .collect();
    let total: f64 = white.centered.iter().map(|v| v * v).sum();
    let resid: f64 = residual.iter().map(|v| v * v).sum();
    let explained_fraction = if total > 0.0 { (1.0 - resid / total).clamp(0.0, 1.0) } else { 1.0 };

    Ok(IcaFit {
        basis: BasisSet::new(dim, cols, sources, white.column_means, 0)?,
        coefficients,
        means: white.means,
        residual_sigma,
        explained_fraction,
        converged,
        iterations,
    })
}

/// Permutation- and scale-invariant distance between two unmixing-style
/// matrices (`k x m`, rows are components).
///
/// Forms `G = recovered * pinv(truth)` and returns
/// `(sum_i (sum_j |g_ij| / max_j |g_ij| - 1) + sum_j (sum_i |g_ij| / max_i |g_ij| - 1)) / (2k)`.
pub fn amari_distance(recovered: &[f64], truth: &[f64], rows: usize, cols: usize) -> Result<f64> {
    if recovered.len() != rows * cols || truth.len() != rows * cols || rows == 0 {
        return Err(Error::dim("amari_distance operands must share a non-empty shape"));
    }
    let pinv = linalg::pinv(rows, cols, truth)
        .ok_or_else(|| Error::Numeric("truth matrix is rank deficient".into()))?;
    let g: Vec<f64> = linalg::matmul(rows, cols, rows, recovered, &pinv).iter().map(|v| v.abs()).collect();
    let k = rows;
    let mut total = 0.0;
    for i in 0..k {
        let row = &g[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Numeric("recovered matrix has a null component".into()));
        }
        total += row.iter().sum::<f64>() / max - 1.0;
    }
    for j in 0..k {
        let col: Vec<f64> = (0..k).map(|i| g[i * k + j]).collect();
        let max = col.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Numeric("recovered matrix misses a truth component".into()));
        }
        total += col.iter().sum::<f64>() / max - 1.0;
    }
    Ok(total / (2.0 * k as f64))
}
