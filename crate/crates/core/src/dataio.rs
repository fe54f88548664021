//! Video and mask volumes, their binary file formats, and the synthetic
//! cardiac phantom used in place of clinical data.
//!
//! Both formats share a 24-byte header: 4 magic bytes, a `u32` version, then
//! `X, Y, Z, T` as `u32`, all little-endian. Volumes (`MSUV`) carry
//! `X*Y*Z*T` little-endian `f32` values, masks (`MSUM`) one byte per voxel.
//! Voxel order is `T` outermost, then `Z`, then `Y`, then `X`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampler::NormStats;

pub const VOLUME_MAGIC: &[u8; 4] = b"MSUV";
pub const MASK_MAGIC: &[u8; 4] = b"MSUM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; 3] = ["RV", "MYO", "LV"];

#[inline]
pub fn voxel_index(dims: [usize; 4], x: usize, y: usize, z: usize, t: usize) -> usize {
    ((t * dims[2] + z) * dims[1] + y) * dims[0] + x
}

fn check_dims(dims: [usize; 4]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::dim(format!("volume dims {dims:?} must be positive")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("volume dims {dims:?} overflow")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub spacing: [f64; 4],
    pub norm: Option<NormStats>,
}

impl Default for VolumeHeader {
    fn default() -> Self {
        Self { spacing: [1.0; 4], norm: None }
    }
}

/// `[X, Y, Z, T]` intensity video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoVolume {
    dims: [usize; 4],
    voxels: Vec<f64>,
    pub header: VolumeHeader,
}

impl VideoVolume {
    pub fn new(dims: [usize; 4], voxels: Vec<f64>) -> Result<Self> {
        let count = check_dims(dims)?;
        if voxels.len() != count {
            return Err(Error::dim(format!("{} voxels for dims {dims:?}", voxels.len())));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite voxel".into()));
        }
        Ok(Self { dims, voxels, header: VolumeHeader::default() })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let count = check_dims(dims)?;
        Ok(Self { dims, voxels: vec![0.0; count], header: VolumeHeader::default() })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, t: usize) -> f64 {
        self.voxels[voxel_index(self.dims, x, y, z, t)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, t: usize, v: f64) {
        let i = voxel_index(self.dims, x, y, z, t);
        self.voxels[i] = v;
    }

    /// Frame `(z, t)` as a row-major `Y x X` slice.
    pub fn frame(&self, z: usize, t: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        let start = voxel_index(self.dims, 0, 0, z, t);
        &self.voxels[start..start + n]
    }

    pub fn frame_count(&self) -> usize {
        self.dims[2] * self.dims[3]
    }
}

/// `[X, Y, Z, T]` label volume with values in `0..NUM_CLASSES`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 4],
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 4], labels: Vec<u8>) -> Result<Self> {
        let count = check_dims(dims)?;
        if labels.len() != count {
            return Err(Error::dim(format!("{} labels for dims {dims:?}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} out of range")));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, t: usize) -> u8 {
        self.labels[voxel_index(self.dims, x, y, z, t)]
    }

    pub fn frame(&self, z: usize, t: usize) -> &[u8] {
        let n = self.dims[0] * self.dims[1];
        let start = voxel_index(self.dims, 0, 0, z, t);
        &self.labels[start..start + n]
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        self.labels.iter().for_each(|&l| h[l as usize] += 1);
        h
    }
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], dims: [usize; 4]) -> Result<()> {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))
}

/// Parses the shared header; returns dims and voxel count.
fn parse_header(bytes: &[u8], magic: &[u8; 4]) -> Result<([usize; 4], usize)> {
    match bytes.get(0..4) {
        Some(m) if m == magic => {}
        Some(_) => {
            return Err(Error::format(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))))
        }
        None => return Err(Error::format(0, "truncated magic")),
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = read_u32(bytes, 8 + 4 * k)? as usize;
        if *d == 0 {
            return Err(Error::format(8 + 4 * k as u64, "zero dimension"));
        }
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(8, "dimension product overflows"))?;
    Ok((dims, count))
}

pub fn encode_volume(v: &VideoVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.voxels.len());
    write_header(&mut out, VOLUME_MAGIC, v.dims)?;
    for &x in &v.voxels {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VideoVolume> {
    let (dims, count) = parse_header(bytes, VOLUME_MAGIC)?;
    let need = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(8, "payload size overflows"))?;
    if bytes.len() < need {
        return Err(Error::format(bytes.len() as u64, format!("truncated payload, expected {need} bytes")));
    }
    if bytes.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after payload"));
    }
    let mut voxels = Vec::with_capacity(count);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::format((HEADER_LEN + 4 * k) as u64, "non-finite voxel"));
        }
        voxels.push(v as f64);
    }
    Ok(VideoVolume { dims, voxels, header: VolumeHeader::default() })
}

pub fn encode_mask(m: &MaskVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.labels.len());
    write_header(&mut out, MASK_MAGIC, m.dims)?;
    out.extend_from_slice(&m.labels);
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let (dims, count) = parse_header(bytes, MASK_MAGIC)?;
    let need = count.checked_add(HEADER_LEN).ok_or_else(|| Error::format(8, "payload size overflows"))?;
    if bytes.len() < need {
        return Err(Error::format(bytes.len() as u64, format!("truncated payload, expected {need} bytes")));
    }
    if bytes.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after payload"));
    }
    let labels = bytes[HEADER_LEN..].to_vec();
    if let Some(k) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::format((HEADER_LEN + k) as u64, format!("label {} out of range", labels[k])));
    }
    Ok(MaskVolume { dims, labels })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_volume(path: impl AsRef<Path>, v: &VideoVolume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VideoVolume> {
    decode_volume(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, m: &MaskVolume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(m)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    decode_mask(&fs::read(path)?)
}

/// Synthetic short-axis cine phantom settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 4],
    pub num_cases: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    /// Cardiac period in frames.
    pub cycle_frames: usize,
    /// Per-slice radius factor from base towards apex.
    pub apex_taper: f64,
    /// Range of the end-systolic LV area loss, as fractions of the diastolic area.
    pub systolic_shrink: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 8, 30],
            num_cases: 30,
            seed: 7,
            noise_sigma: 0.05,
            bias_field_amplitude: 0.1,
            cycle_frames: 30,
            apex_taper: 0.93,
            systolic_shrink: (0.3, 0.5),
        }
    }
}

const INTENSITY: [f64; NUM_CLASSES] = [0.1, 0.8, 0.45, 1.0];

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        check_dims(self.dims)?;
        if self.cycle_frames < 2 {
            return Err(Error::config("cycle_frames must be at least 2"));
        }
        if !(self.apex_taper > 0.0 && self.apex_taper <= 1.0) {
            return Err(Error::config("apex_taper must lie in (0, 1]"));
        }
        let (lo, hi) = self.systolic_shrink;
        if !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
            return Err(Error::config("systolic_shrink must satisfy 0 <= lo <= hi < 1"));
        }
        if self.noise_sigma < 0.0 || self.bias_field_amplitude < 0.0 || self.bias_field_amplitude >= 1.0 {
            return Err(Error::config("noise_sigma must be >= 0 and bias amplitude in [0, 1)"));
        }
        // worst-case case geometry must fit with its jitter inside the plane
        let side = self.dims[0].min(self.dims[1]) as f64;
        let outer = side * (LV_RADIUS.1 + MYO_THICKNESS.1 * 1.3);
        let reach = outer * (RV_OFFSET + RV_RADIUS) + side * CENTER_JITTER;
        let apex_myo = side * MYO_THICKNESS.0 * self.apex_taper.powi(self.dims[2] as i32 - 1);
        if reach > side / 2.0 - 1.0 || apex_myo < 1.5 || side < 24.0 {
            return Err(Error::config(format!(
                "plane {}x{} with taper {} is too small to hold the ventricles and myocardial ring",
                self.dims[0], self.dims[1], self.apex_taper
            )));
        }
        Ok(())
    }
}

const LV_RADIUS: (f64, f64) = (0.10, 0.13);
const MYO_THICKNESS: (f64, f64) = (0.05, 0.065);
const RV_OFFSET: f64 = 0.7;
const RV_RADIUS: f64 = 1.15;
const CENTER_JITTER: f64 = 0.05;

struct CaseGeometry {
    center: (f64, f64),
    lv_radius: f64,
    aspect: f64,
    thickness: f64,
    rv_dir: (f64, f64),
    shrink: f64,
    bias_phase: (f64, f64),
    bias_freq: (f64, f64),
}

impl CaseGeometry {
    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let side = cfg.dims[0].min(cfg.dims[1]) as f64;
        let jitter = side * CENTER_JITTER;
        let angle = rng.random_range(0.75 * PI..1.25 * PI);
        let (lo, hi) = cfg.systolic_shrink;
        Self {
            center: (
                cfg.dims[0] as f64 / 2.0 + rng.random_range(-jitter..=jitter),
                cfg.dims[1] as f64 / 2.0 + rng.random_range(-jitter..=jitter),
            ),
            lv_radius: side * rng.random_range(LV_RADIUS.0..=LV_RADIUS.1),
            aspect: rng.random_range(0.9..1.1),
            thickness: side * rng.random_range(MYO_THICKNESS.0..=MYO_THICKNESS.1),
            rv_dir: (angle.cos(), angle.sin()),
            shrink: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            bias_phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
            bias_freq: (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)),
        }
    }

    /// Label of the pixel centred at `(px, py)` on slice `z` at frame `t`.
    fn label(&self, cfg: &PhantomConfig, px: f64, py: f64, z: usize, t: usize) -> u8 {
        let contraction = 0.5 * (1.0 - (2.0 * PI * t as f64 / cfg.cycle_frames as f64).cos());
        let radius_factor = 1.0 - (1.0 - (1.0 - self.shrink).sqrt()) * contraction;
        let taper = cfg.apex_taper.powi(z as i32);
        let lv = self.lv_radius * radius_factor * taper;
        let outer = lv + self.thickness * (1.0 + 0.3 * contraction) * taper;
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let rho = ((dx / self.aspect).powi(2) + (dy * self.aspect).powi(2)).sqrt();
        if rho <= lv {
            return LV;
        }
        if rho <= outer {
            return MYO;
        }
        let rv_c = (self.center.0 + self.rv_dir.0 * RV_OFFSET * outer, self.center.1 + self.rv_dir.1 * RV_OFFSET * outer);
        if (px - rv_c.0).powi(2) + (py - rv_c.1).powi(2) <= (RV_RADIUS * outer).powi(2) {
            return RV;
        }
        BACKGROUND
    }
}

/// One phantom case per configured case index, deterministic in `config.seed`.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Vec<(VideoVolume, MaskVolume)>> {
    config.validate()?;
    (0..config.num_cases)
        .into_par_iter()
        .map(|case| generate_case(config, case))
        .collect()
}

fn generate_case(cfg: &PhantomConfig, case: usize) -> Result<(VideoVolume, MaskVolume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ case as u64);
    let geo = CaseGeometry::sample(cfg, &mut rng);
    let dims = cfg.dims;
    let [nx, ny, nz, nt] = dims;
    let mut labels = vec![0u8; nx * ny * nz * nt];
    let mut voxels = vec![0.0f64; labels.len()];
    for t in 0..nt {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let l = geo.label(cfg, px, py, z, t);
                    let bias = 1.0
                        + cfg.bias_field_amplitude
                            * (2.0 * PI * geo.bias_freq.0 * px / nx as f64 + geo.bias_phase.0).sin()
                            * (2.0 * PI * geo.bias_freq.1 * py / ny as f64 + geo.bias_phase.1).cos();
                    let noise: f64 = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    let i = voxel_index(dims, x, y, z, t);
                    labels[i] = l;
                    voxels[i] = (INTENSITY[l as usize] * bias + noise) as f32 as f64;
                }
            }
        }
    }
    Ok((VideoVolume::new(dims, voxels)?, MaskVolume::new(dims, labels)?))
}

/// Fixed split of a case list into train, validation and test parts.
pub fn split_cases<T: Clone>(cases: &[T], train: usize, val: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let train_end = train.min(cases.len());
    let val_end = (train + val).min(cases.len());
    (cases[..train_end].to_vec(), cases[train_end..val_end].to_vec(), cases[val_end..].to_vec())
}
