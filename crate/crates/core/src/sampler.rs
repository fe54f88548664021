//! Normalization, multiscale patch tiling, per-snippet basis fitting and the
//! inverse scatter back to a video.
//!
//! Patch layout inside one `n x n x t` tile is time-major:
//! `j = f * n^2 + ty * n + tx` for frame offset `f`, in-tile row `ty` and
//! in-tile column `tx`. Grid positions are ordered `(z, gy, gx)`, `gx` fastest.

use std::sync::Arc;

use rayon::prelude::*;

use crate::canonical::{mix, CanonicalFormGrid, GridGeometry};
use crate::dataio::VideoVolume;
use crate::error::{Error, Result};
use crate::ica::{ica_fit, IcaConfig, IcaFit, SAMPLES_PER_DIM};

/// Sampling parameters of one scale branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleSpec {
    /// Patch side in the X-Y plane.
    pub patch: usize,
    /// Snippet span in frames.
    pub span: usize,
    pub stride: usize,
    /// Basis dimension.
    pub dim: usize,
}

impl ScaleSpec {
    pub fn new(patch: usize, span: usize, dim: usize) -> Result<Self> {
        let s = Self { patch, span, stride: patch, dim };
        s.validate()?;
        Ok(s)
    }

    /// Chooses `d = round(ratio * n^2 * t)`, at least 1.
    pub fn from_ratio(patch: usize, span: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!("compression ratio {ratio} must lie in (0, 1]")));
        }
        let dim = ((ratio * (patch * patch * span) as f64).round() as usize).max(1);
        Self::new(patch, span, dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.span == 0 || self.stride == 0 {
            return Err(Error::config("patch, span and stride must be positive"));
        }
        if self.dim == 0 || self.dim > self.patch_len() {
            return Err(Error::config(format!(
                "basis dimension {} must lie in 1..={} for n={}, t={}",
                self.dim,
                self.patch_len(),
                self.patch,
                self.span
            )));
        }
        Ok(())
    }

    /// Outcome slots per patch, `n^2 * t`.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.span
    }

    /// Realized compression ratio `d / (n^2 t)`.
    pub fn ratio(&self) -> f64 {
        self.dim as f64 / self.patch_len() as f64
    }

    pub fn grid_dims(&self, dims: [usize; 4]) -> [usize; 3] {
        [dims[0].div_ceil(self.stride), dims[1].div_ceil(self.stride), dims[2]]
    }

    pub fn label(&self) -> String {
        format!("n{}t{}d{}", self.patch, self.span, self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Global z-score. A constant video maps to zeros with `std` recorded as 1.
pub fn normalize(video: &VideoVolume) -> (VideoVolume, NormStats) {
    let n = video.voxels().len() as f64;
    let mean = video.voxels().iter().sum::<f64>() / n;
    let var = video.voxels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let mut out = video.clone();
    out.voxels_mut().iter_mut().for_each(|v| *v = if var > 0.0 { (*v - mean) / std } else { 0.0 });
    let stats = NormStats { mean, std };
    out.header.norm = Some(stats);
    (out, stats)
}

pub fn denormalize(video: &VideoVolume, stats: &NormStats) -> VideoVolume {
    let mut out = video.clone();
    out.voxels_mut().iter_mut().for_each(|v| *v = *v * stats.std + stats.mean);
    out.header.norm = None;
    out
}

/// Snippet boundaries along `T` and the per-scale tiling of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetPlan {
    pub dims: [usize; 4],
    pub span: usize,
    pub snippets: usize,
    pub scales: Vec<ScaleSpec>,
}

impl SnippetPlan {
    pub fn new(dims: [usize; 4], scales: &[ScaleSpec]) -> Result<Self> {
        let span = scales.first().ok_or_else(|| Error::config("at least one scale is required"))?.span;
        for s in scales {
            s.validate()?;
            if s.stride != s.patch {
                return Err(Error::config(format!("scale {} uses stride {}; only stride = n tiling is supported", s.label(), s.stride)));
            }
            if s.span != span {
                return Err(Error::config("all scales of one plan must share the snippet span"));
            }
        }
        Ok(Self { dims, span, snippets: dims[3].div_ceil(span), scales: scales.to_vec() })
    }

    /// Frames `[start, end)` of snippet `s` that exist in the video.
    pub fn frames(&self, s: usize) -> std::ops::Range<usize> {
        let start = s * self.span;
        start..(start + self.span).min(self.dims[3])
    }

    /// Stored floats for one snippet of one scale: `P (d + 2) + d n^2 t + n^2 t`.
    pub fn stored_floats(&self, scale: usize) -> usize {
        let s = &self.scales[scale];
        let g = s.grid_dims(self.dims);
        let cells = g[0] * g[1] * g[2];
        cells * (s.dim + 2) + s.dim * s.patch_len() + s.patch_len()
    }

    /// Per-cell payload ratio `(d + 2) / (n^2 t)`.
    pub fn payload_ratio(&self, scale: usize) -> f64 {
        let s = &self.scales[scale];
        (s.dim + 2) as f64 / s.patch_len() as f64
    }
}

/// Gathers the `P x n^2 t` patch matrix of snippet `snippet`, zero-padded at
/// the right/bottom borders and past the last frame.
pub fn gather_patches(video: &VideoVolume, spec: &ScaleSpec, snippet: usize) -> (Vec<f64>, usize) {
    let dims = video.dims();
    let [gx, gy, nz] = spec.grid_dims(dims);
    let (n, t) = (spec.patch, spec.span);
    let len = spec.patch_len();
    let rows = gx * gy * nz;
    let mut samples = vec![0.0; rows * len];
    samples.par_chunks_mut(len * gx * gy).enumerate().for_each(|(z, block)| {
        for cy in 0..gy {
            for cx in 0..gx {
                let row = &mut block[(cy * gx + cx) * len..(cy * gx + cx + 1) * len];
                for f in 0..t {
                    let frame = snippet * t + f;
                    if frame >= dims[3] {
                        break;
                    }
                    for ty in 0..n {
                        let y = cy * n + ty;
                        if y >= dims[1] {
                            break;
                        }
                        for tx in 0..n {
                            let x = cx * n + tx;
                            if x >= dims[0] {
                                break;
                            }
                            row[f * n * n + ty * n + tx] = video.get(x, y, z, frame);
                        }
                    }
                }
            }
        }
    });
    (samples, rows)
}

fn grid_from_fit(fit: IcaFit, spec: &ScaleSpec, scale_id: usize, dims: [usize; 4]) -> Result<CanonicalFormGrid> {
    let mut basis = fit.basis;
    basis.scale_id = scale_id;
    let geometry = GridGeometry { volume_dims: dims, stride: spec.stride, patch: spec.patch, span: spec.span };
    CanonicalFormGrid::from_parts(
        1,
        spec.grid_dims(dims),
        Arc::new(basis),
        geometry,
        fit.means,
        fit.coefficients,
        fit.residual_sigma,
    )
}

/// Fit summary for one (snippet, scale) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSummary {
    pub explained_fraction: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Collapses every snippet of a normalized video at one scale.
pub fn extract(video: &VideoVolume, spec: &ScaleSpec, ica: &IcaConfig) -> Result<Vec<CanonicalFormGrid>> {
    Ok(extract_scale(video, spec, 0, ica)?.into_iter().map(|(g, _)| g).collect())
}

pub fn extract_scale(
    video: &VideoVolume,
    spec: &ScaleSpec,
    scale_id: usize,
    ica: &IcaConfig,
) -> Result<Vec<(CanonicalFormGrid, FitSummary)>> {
    spec.validate()?;
    if spec.stride != spec.patch {
        return Err(Error::config(format!("scale {}: only stride = n tiling is supported", spec.label())));
    }
    let dims = video.dims();
    let g = spec.grid_dims(dims);
    let rows = g[0] * g[1] * g[2];
    if rows < SAMPLES_PER_DIM * spec.dim {
        return Err(Error::config(format!(
            "scale {} pools only {rows} patches across all Z slices; needs at least {}",
            spec.label(),
            SAMPLES_PER_DIM * spec.dim
        )));
    }
    let snippets = dims[3].div_ceil(spec.span);
    (0..snippets)
        .into_par_iter()
        .map(|s| {
            let (samples, rows) = gather_patches(video, spec, s);
            let fit = ica_fit(&samples, rows, spec.patch_len(), spec.dim, ica).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("scale {}: {m}", spec.label())),
                Error::Rank(m) => Error::Rank(format!("scale {}: {m}", spec.label())),
                other => other,
            })?;
            let summary =
                FitSummary { explained_fraction: fit.explained_fraction, converged: fit.converged, iterations: fit.iterations };
            Ok((grid_from_fit(fit, spec, scale_id, dims)?, summary))
        })
        .collect()
}

/// All scales of a video: `grids[snippet][scale]`.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub plan: SnippetPlan,
    pub grids: Vec<Vec<CanonicalFormGrid>>,
    pub fits: Vec<Vec<FitSummary>>,
}

pub fn extract_multiscale(video: &VideoVolume, scales: &[ScaleSpec], ica: &IcaConfig) -> Result<Extraction> {
    let plan = SnippetPlan::new(video.dims(), scales)?;
    let per_scale: Vec<Vec<(CanonicalFormGrid, FitSummary)>> = scales
        .iter()
        .enumerate()
        .map(|(k, s)| extract_scale(video, s, k, ica))
        .collect::<Result<_>>()?;
    let mut grids = vec![Vec::with_capacity(scales.len()); plan.snippets];
    let mut fits = vec![Vec::with_capacity(scales.len()); plan.snippets];
    for scale in per_scale {
        for (s, (g, f)) in scale.into_iter().enumerate() {
            grids[s].push(g);
            fits[s].push(f);
        }
    }
    Ok(Extraction { plan, grids, fits })
}

/// Scatters one snippet's patch outcomes (column means added back) into a
/// padded volume buffer; returns the number of voxel writes.
fn scatter_snippet(grid: &CanonicalFormGrid, spec: &ScaleSpec, snippet: usize, values: &[f64], padded: [usize; 4], out: &mut [f64]) -> usize {
    let [gx, gy, nz] = grid.dims();
    let (n, t) = (spec.patch, spec.span);
    let len = spec.patch_len();
    let cm = grid.basis().column_means();
    let mut writes = 0;
    for z in 0..nz {
        for cy in 0..gy {
            for cx in 0..gx {
                let cell = (z * gy + cy) * gx + cx;
                let patch = &values[cell * len..(cell + 1) * len];
                for f in 0..t {
                    for ty in 0..n {
                        for tx in 0..n {
                            let j = f * n * n + ty * n + tx;
                            let idx = crate::dataio::voxel_index(padded, cx * n + tx, cy * n + ty, z, snippet * t + f);
                            out[idx] = patch[j] + cm[j];
                            writes += 1;
                        }
                    }
                }
            }
        }
    }
    writes
}

/// Rebuilds a video from one grid per snippet (single scale).
///
/// `noise_seed` switches on the residual draw, seeded per snippet.
pub fn restore(grids: &[CanonicalFormGrid], plan: &SnippetPlan, scale: usize, norm: &NormStats, noise_seed: Option<u64>) -> Result<VideoVolume> {
    let (padded, buffer) = restore_padded(grids, plan, scale, noise_seed)?;
    let dims = plan.dims;
    let mut out = VideoVolume::zeros(dims)?;
    for t in 0..dims[3] {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let v = buffer[crate::dataio::voxel_index(padded, x, y, z, t)];
                    out.set(x, y, z, t, v * norm.std + norm.mean);
                }
            }
        }
    }
    Ok(out)
}

/// Scatter into the padded `[Gx n, Gy n, Z, snippets t]` volume; also used
/// to verify the partition property.
pub fn restore_padded(grids: &[CanonicalFormGrid], plan: &SnippetPlan, scale: usize, noise_seed: Option<u64>) -> Result<([usize; 4], Vec<f64>)> {
    let spec = plan.scales.get(scale).ok_or_else(|| Error::dim(format!("plan has no scale {scale}")))?;
    if grids.len() != plan.snippets {
        return Err(Error::dim(format!("{} grids for a plan of {} snippets", grids.len(), plan.snippets)));
    }
    let g = spec.grid_dims(plan.dims);
    for grid in grids {
        if grid.dims() != g || grid.channels() != 1 || grid.basis().len() != spec.patch_len() || grid.basis().dim() != spec.dim {
            return Err(Error::dim(format!(
                "grid {:?} (d={}, len={}) does not match scale {} tiling {:?}",
                grid.dims(),
                grid.basis().dim(),
                grid.basis().len(),
                spec.label(),
                g
            )));
        }
    }
    let padded = [g[0] * spec.patch, g[1] * spec.patch, plan.dims[2], plan.snippets * spec.span];
    let mut buffer = vec![0.0; padded.iter().product()];
    let mut writes = 0;
    for (s, grid) in grids.iter().enumerate() {
        let mixed = mix(grid, noise_seed.is_some(), noise_seed.map(|seed| seed.wrapping_add(s as u64)));
        writes += scatter_snippet(grid, spec, s, &mixed.values, padded, &mut buffer);
    }
    debug_assert_eq!(writes, buffer.len());
    Ok((padded, buffer))
}

/// RMSE between two videos divided by the standard deviation of `reference`.
pub fn normalized_rmse(restored: &VideoVolume, reference: &VideoVolume) -> Result<f64> {
    if restored.dims() != reference.dims() {
        return Err(Error::dim("videos differ in shape"));
    }
    let n = reference.voxels().len() as f64;
    let mse = restored.voxels().iter().zip(reference.voxels()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mean = reference.voxels().iter().sum::<f64>() / n;
    let var = reference.voxels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(if var > 0.0 { (mse / var).sqrt() } else { mse.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(dims: [usize; 4], seed: u64) -> VideoVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        VideoVolume::new(dims, (0..n).map(|_| rng.random_range(-2.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn ratio_rounding() {
        let s = ScaleSpec::from_ratio(7, 5, 0.1).unwrap();
        assert_eq!(s.dim, 25);
        assert!((s.ratio() - 25.0 / 245.0).abs() < 1e-12);
        assert!((s.ratio() - 0.102).abs() < 1e-3);
        assert_eq!(ScaleSpec::from_ratio(7, 5, 1.0 / 40.0).unwrap().dim, 6);
        assert_eq!(ScaleSpec::from_ratio(4, 5, 0.1).unwrap().dim, 8);
        assert_eq!(ScaleSpec::from_ratio(8, 5, 0.1).unwrap().dim, 32);
        assert_eq!(ScaleSpec::from_ratio(1, 1, 0.1).unwrap().dim, 1);
        assert!(ScaleSpec::new(2, 2, 9).is_err());
    }

    #[test]
    fn constant_video_normalizes_to_zero() {
        let v = VideoVolume::new([2, 3, 1, 2], vec![7.0; 12]).unwrap();
        let (n, stats) = normalize(&v);
        assert!(n.voxels().iter().all(|&x| x == 0.0));
        assert_eq!(stats, NormStats { mean: 7.0, std: 1.0 });
    }

    #[test]
    fn normalize_is_a_z_score_and_inverts() {
        let v = random_video([5, 4, 3, 6], 1);
        let (n, stats) = normalize(&v);
        let len = n.voxels().len() as f64;
        let mean = n.voxels().iter().sum::<f64>() / len;
        let std = (n.voxels().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        let back = denormalize(&n, &stats);
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_layout_is_time_major() {
        let dims = [4, 4, 1, 2];
        let mut v = VideoVolume::zeros(dims).unwrap();
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    v.set(x, y, 0, t, (100 * t + 10 * y + x) as f64);
                }
            }
        }
        let spec = ScaleSpec::new(2, 2, 1).unwrap();
        let (samples, rows) = gather_patches(&v, &spec, 0);
        assert_eq!(rows, 4);
        // cell (gx=1, gy=1) is row 3; j = f*4 + ty*2 + tx
        let row = &samples[3 * 8..4 * 8];
        assert_eq!(row, &[22.0, 23.0, 32.0, 33.0, 122.0, 123.0, 132.0, 133.0]);
    }

    #[test]
    fn extract_shapes_for_paper_scale() {
        let v = normalize(&random_video([56, 56, 10, 5], 2)).0;
        let spec = ScaleSpec::new(7, 5, 25).unwrap();
        let grids = extract(&v, &spec, &IcaConfig { max_iter: 50, ..Default::default() }).unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].dims(), [8, 8, 10]);
        assert_eq!(grids[0].cell_count(), 640);
        assert_eq!(grids[0].basis().dim(), 25);
        assert_eq!(grids[0].basis().len(), 245);
    }

    #[test]
    fn unit_scale_is_an_identity() {
        let v = random_video([6, 5, 3, 4], 3);
        let (n, stats) = normalize(&v);
        let spec = ScaleSpec::new(1, 1, 1).unwrap();
        let grids = extract(&n, &spec, &IcaConfig::default()).unwrap();
        assert_eq!(grids.len(), 4);
        assert_eq!(grids[0].dims(), [6, 5, 3]);
        for (t, g) in grids.iter().enumerate() {
            for z in 0..3 {
                for y in 0..5 {
                    for x in 0..6 {
                        assert!((g.cell(0, x, y, z).mean - n.get(x, y, z, t)).abs() < 1e-12);
                    }
                }
            }
        }
        let plan = SnippetPlan::new(v.dims(), &[spec]).unwrap();
        let back = restore(&grids, &plan, 0, &stats, None).unwrap();
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn full_rank_restore_is_exact_with_padding() {
        let v = random_video([29, 20, 4, 7], 4);
        let (n, stats) = normalize(&v);
        let spec = ScaleSpec::new(3, 2, 18).unwrap();
        let grids = extract(&n, &spec, &IcaConfig { max_iter: 20, ..Default::default() }).unwrap();
        assert_eq!(grids.len(), 4);
        let plan = SnippetPlan::new(v.dims(), &[spec]).unwrap();
        let back = restore(&grids, &plan, 0, &stats, None).unwrap();
        for (a, b) in back.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn restore_scatter_is_a_partition() {
        let v = normalize(&random_video([10, 6, 2, 5], 5)).0;
        let spec = ScaleSpec::new(4, 3, 1).unwrap();
        let grids = extract(&v, &spec, &IcaConfig::default()).unwrap();
        let padded = [12, 8, 2, 6];
        let mut buf = vec![f64::NAN; padded.iter().product()];
        let mut writes = 0;
        for (s, g) in grids.iter().enumerate() {
            let mixed = mix(g, false, None);
            writes += scatter_snippet(g, &spec, s, &mixed.values, padded, &mut buf);
        }
        // as many writes as voxels and none left unwritten: each written once
        assert_eq!(writes, buf.len());
        assert!(buf.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn restore_rejects_mismatched_grids() {
        let v = normalize(&random_video([8, 8, 2, 4], 6)).0;
        let spec = ScaleSpec::new(2, 2, 2).unwrap();
        let grids = extract(&v, &spec, &IcaConfig::default()).unwrap();
        let other = SnippetPlan::new([8, 8, 2, 4], &[ScaleSpec::new(4, 2, 2).unwrap()]).unwrap();
        let stats = NormStats { mean: 0.0, std: 1.0 };
        assert!(matches!(restore(&grids, &other, 0, &stats, None), Err(Error::Dimension(_))));
        let plan = SnippetPlan::new([8, 8, 2, 4], &[spec]).unwrap();
        assert!(matches!(restore(&grids[..1], &plan, 0, &stats, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn too_few_patches_names_the_scale() {
        let v = normalize(&random_video([8, 8, 1, 4], 7)).0;
        let spec = ScaleSpec::new(4, 4, 10).unwrap();
        match extract(&v, &spec, &IcaConfig::default()) {
            Err(Error::Config(m)) => assert!(m.contains("n4t4d10"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn z_permutation_permutes_cells_and_keeps_basis() {
        let v = normalize(&random_video([8, 8, 3, 2], 8)).0;
        let dims = v.dims();
        let perm = [2usize, 0, 1];
        let mut p = VideoVolume::zeros(dims).unwrap();
        for t in 0..dims[3] {
            for (znew, &zold) in perm.iter().enumerate() {
                for y in 0..8 {
                    for x in 0..8 {
                        p.set(x, y, znew, t, v.get(x, y, zold, t));
                    }
                }
            }
        }
        let spec = ScaleSpec::new(2, 2, 3).unwrap();
        let cfg = IcaConfig { method: crate::ica::Decomposition::Pca, ..Default::default() };
        let a = extract(&v, &spec, &cfg).unwrap().remove(0);
        let b = extract(&p, &spec, &cfg).unwrap().remove(0);
        for (x, y) in a.basis().sources().iter().zip(b.basis().sources()) {
            assert!((x - y).abs() < 1e-8);
        }
        for (znew, &zold) in perm.iter().enumerate() {
            for y in 0..4 {
                for x in 0..4 {
                    let ca = a.cell(0, x, y, zold);
                    let cb = b.cell(0, x, y, znew);
                    assert!((ca.mean - cb.mean).abs() < 1e-10 && (ca.noise - cb.noise).abs() < 1e-8);
                    for (u, w) in ca.coeffs.iter().zip(&cb.coeffs) {
                        assert!((u - w).abs() < 1e-8);
                    }
                }
            }
        }
    }
}
