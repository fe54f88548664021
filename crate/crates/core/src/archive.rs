//! Canonical-form archive: the collapsed representation of one video at
//! every scale, so extraction, restoration and training can run as separate
//! processes.
//!
//! Layout (little-endian): `MSUA`, u32 version, four u32 dims, f64 mean and
//! f64 std of the normalization, u32 scale count, per scale four u32
//! `(patch, span, stride, dim)`, u32 snippet count; then for every snippet and
//! scale: sources `dim x n^2 t`, column means `n^2 t`, cell means, cell
//! coefficients (`dim` per cell) and cell residual weights, all as f32.

use std::path::Path;
use std::sync::Arc;

use crate::canonical::{BasisSet, CanonicalFormGrid, GridGeometry};
use crate::error::{Error, Result};
use crate::sampler::{NormStats, ScaleSpec, SnippetPlan};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"MSUA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CanonicalArchive {
    pub plan: SnippetPlan,
    pub norm: NormStats,
    /// `grids[snippet][scale]`.
    pub grids: Vec<Vec<CanonicalFormGrid>>,
}

impl CanonicalArchive {
    /// Floats stored for every grid, matching the plan's accounting.
    pub fn stored_floats(&self) -> usize {
        (0..self.plan.scales.len()).map(|k| self.plan.stored_floats(k)).sum::<usize>() * self.plan.snippets
    }

    /// Grids of one scale in snippet order.
    pub fn scale_grids(&self, scale: usize) -> Vec<CanonicalFormGrid> {
        self.grids.iter().map(|g| g[scale].clone()).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::dim(format!("{v} does not fit the archive header")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_archive(a: &CanonicalArchive) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    for &d in &a.plan.dims {
        put_u32(&mut out, d)?;
    }
    out.extend_from_slice(&a.norm.mean.to_le_bytes());
    out.extend_from_slice(&a.norm.std.to_le_bytes());
    put_u32(&mut out, a.plan.scales.len())?;
    for s in &a.plan.scales {
        for v in [s.patch, s.span, s.stride, s.dim] {
            put_u32(&mut out, v)?;
        }
    }
    put_u32(&mut out, a.plan.snippets)?;
    if a.grids.len() != a.plan.snippets {
        return Err(Error::dim("archive grids do not cover the snippet plan"));
    }
    for snippet in &a.grids {
        if snippet.len() != a.plan.scales.len() {
            return Err(Error::dim("archive snippet lacks a scale"));
        }
        for (g, s) in snippet.iter().zip(&a.plan.scales) {
            if g.basis().dim() != s.dim || g.basis().len() != s.patch_len() || g.dims() != s.grid_dims(a.plan.dims) {
                return Err(Error::dim(format!("grid does not match scale {}", s.label())));
            }
            put_f32s(&mut out, g.basis().sources());
            put_f32s(&mut out, g.basis().column_means());
            put_f32s(&mut out, g.means());
            put_f32s(&mut out, g.coeffs());
            put_f32s(&mut out, g.noise());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::format(self.bytes.len() as u64, format!("truncated archive, needed {n} bytes at {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(start as u64, "block size overflows"))?)?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(k, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(Error::format((start + 4 * k) as u64, "non-finite value"))
                }
            })
            .collect()
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<CanonicalArchive> {
    if bytes.len() < 4 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::format(0, "not a canonical-form archive"));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    if version != ARCHIVE_VERSION as usize {
        return Err(Error::format(4, format!("unsupported archive version {version}")));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = c.u32()?;
        if *d == 0 {
            return Err(Error::format(8 + 4 * k as u64, "zero dimension"));
        }
    }
    let norm = NormStats { mean: c.f64()?, std: c.f64()? };
    let scale_off = c.pos;
    let count = c.u32()?;
    if count == 0 || count > 64 {
        return Err(Error::format(scale_off as u64, format!("implausible scale count {count}")));
    }
    let mut scales = Vec::with_capacity(count);
    for _ in 0..count {
        let off = c.pos;
        let (patch, span, stride, dim) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
        let s = ScaleSpec { patch, span, stride, dim };
        s.validate().map_err(|e| Error::format(off as u64, e.to_string()))?;
        scales.push(s);
    }
    let plan_off = c.pos;
    let plan = SnippetPlan::new(dims, &scales).map_err(|e| Error::format(scale_off as u64, e.to_string()))?;
    let snippets = c.u32()?;
    if snippets != plan.snippets {
        return Err(Error::format(plan_off as u64, format!("{snippets} snippets stored, plan needs {}", plan.snippets)));
    }
    let mut grids = Vec::with_capacity(snippets);
    for _ in 0..snippets {
        let mut row = Vec::with_capacity(scales.len());
        for (k, s) in scales.iter().enumerate() {
            let len = s.patch_len();
            let g = s.grid_dims(dims);
            let cells = g[0] * g[1] * g[2];
            let sources = c.f32s(s.dim * len)?;
            let column_means = c.f32s(len)?;
            let means = c.f32s(cells)?;
            let coeffs = c.f32s(cells * s.dim)?;
            let noise_off = c.pos;
            let noise = c.f32s(cells)?;
            let basis = BasisSet::new(s.dim, len, sources, column_means, k)?;
            let geometry = GridGeometry { volume_dims: dims, stride: s.stride, patch: s.patch, span: s.span };
            row.push(
                CanonicalFormGrid::from_parts(1, g, Arc::new(basis), geometry, means, coeffs, noise)
                    .map_err(|e| Error::format(noise_off as u64, e.to_string()))?,
            );
        }
        grids.push(row);
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after archive"));
    }
    Ok(CanonicalArchive { plan, norm, grids })
}

pub fn write_archive(path: impl AsRef<Path>, a: &CanonicalArchive) -> Result<()> {
    std::fs::write(path, encode_archive(a)?)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<CanonicalArchive> {
    decode_archive(&std::fs::read(path)?)
}
