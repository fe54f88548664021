//! Plane tensors and the kernels of every layer kind, forward and backward.
//!
//! A [`PlaneTensor`] stores `[channel][plane][row][col]`. Statistical tensors
//! hold `d + 2` planes per channel: the mean, the `d` source weights, and the
//! residual weight last. Deterministic tensors hold independent samples
//! (frames, or outcome slots of a cell grid) as planes. Linear layers share
//! their weights across planes; in statistical tensors the bias touches only
//! the mean plane and the residual plane combines in quadrature.

use crate::canonical::BasisSet;
use crate::linalg::gemm_strided;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneKind {
    Stat,
    Det,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub planes: usize,
    pub kind: PlaneKind,
    pub data: Vec<f64>,
}

impl PlaneTensor {
    pub fn zeros(kind: PlaneKind, channels: usize, planes: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, planes, kind, data: vec![0.0; channels * planes * height * width] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.kind, other.channels, other.planes, other.height, other.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn channel_len(&self) -> usize {
        self.planes * self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, k: usize, y: usize, x: usize) -> usize {
        ((c * self.planes + k) * self.height + y) * self.width + x
    }

    /// Planes that go through the weight GEMM (all but the residual plane).
    #[inline]
    pub fn linear_planes(&self) -> usize {
        match self.kind {
            PlaneKind::Stat => self.planes - 1,
            PlaneKind::Det => self.planes,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
            && self.planes == other.planes
            && self.kind == other.kind
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Spatial kernel of a convolution-like layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel {
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Kernel {
    pub const CONV3: Kernel = Kernel { size: 3, stride: 1, pad: 1 };
    pub const DOWN3: Kernel = Kernel { size: 3, stride: 2, pad: 1 };
    pub const CONV1: Kernel = Kernel { size: 1, stride: 1, pad: 0 };

    #[inline]
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.size) / self.stride + 1
    }
}

/// `im2col` over every plane: rows `(ci, ky, kx)`, columns `(plane, oy, ox)`.
fn im2col(x: &PlaneTensor, k: Kernel) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (k.out_len(x.height), k.out_len(x.width));
    let ncols = x.planes * ho * wo;
    let kk = k.size * k.size;
    let mut col = vec![0.0; x.channels * kk * ncols];
    for ci in 0..x.channels {
        for ky in 0..k.size {
            for kx in 0..k.size {
                let row = (ci * kk + ky * k.size + kx) * ncols;
                for p in 0..x.planes {
                    let src = &x.data[(ci * x.planes + p) * x.height * x.width..][..x.height * x.width];
                    let dst = &mut col[row + p * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * k.stride + ky) as isize - k.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.width..][..x.width];
                        let drow = &mut dst[oy * wo..][..wo];
                        if k.stride == 1 {
                            // contiguous run, shifted by kx - pad
                            let shift = kx as isize - k.pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = ((x.width as isize - shift).min(wo as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + shift) as usize;
                                drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * k.stride + kx) as isize - k.pad as isize;
                                if ix >= 0 && (ix as usize) < x.width {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im(dcol: &[f64], dx: &mut PlaneTensor, k: Kernel, ho: usize, wo: usize, planes: usize) {
    let ncols = dx.planes * ho * wo;
    let kk = k.size * k.size;
    let (h, w) = (dx.height, dx.width);
    for ci in 0..dx.channels {
        for ky in 0..k.size {
            for kx in 0..k.size {
                let row = (ci * kk + ky * k.size + kx) * ncols;
                for p in 0..planes {
                    let src = &dcol[row + p * ho * wo..][..ho * wo];
                    let base = (ci * dx.planes + p) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * k.stride + ky) as isize - k.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dx.data[base + iy as usize * w..][..w];
                        let srow = &src[oy * wo..][..wo];
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * k.stride + kx) as isize - k.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut PlaneTensor, bias: &[f64]) {
    let pl = out.plane_len();
    let bias_planes = match out.kind {
        PlaneKind::Stat => 1,
        PlaneKind::Det => out.planes,
    };
    for (c, &b) in bias.iter().enumerate() {
        let start = c * out.channel_len();
        out.data[start..start + bias_planes * pl].iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(dout: &PlaneTensor, dbias: &mut [f64]) {
    let pl = dout.plane_len();
    let bias_planes = match dout.kind {
        PlaneKind::Stat => 1,
        PlaneKind::Det => dout.planes,
    };
    for (c, db) in dbias.iter_mut().enumerate() {
        let start = c * dout.channel_len();
        *db += dout.data[start..start + bias_planes * pl].iter().sum::<f64>();
    }
}

/// Convolution with weights `[co][ci][ky][kx]`.
pub fn conv_forward(x: &PlaneTensor, weights: &[f64], bias: &[f64], out_channels: usize, k: Kernel) -> PlaneTensor {
    let (col, ho, wo) = im2col(x, k);
    let kk = k.size * k.size;
    let rows = x.channels * kk;
    let ncols = x.planes * ho * wo;
    let mut out = PlaneTensor::zeros(x.kind, out_channels, x.planes, ho, wo);
    let lin = x.linear_planes() * ho * wo;
    gemm_strided(
        out_channels, rows, lin, 1.0, weights, rows as isize, 1, &col, ncols as isize, 1, 0.0, &mut out.data,
        ncols as isize, 1,
    );
    add_bias(&mut out, bias);
    if x.kind == PlaneKind::Stat {
        let noise_off = lin;
        let w2: Vec<f64> = weights.iter().map(|w| w * w).collect();
        let mut col2 = vec![0.0; rows * ho * wo];
        for r in 0..rows {
            for (d, s) in col2[r * ho * wo..(r + 1) * ho * wo].iter_mut().zip(&col[r * ncols + noise_off..]) {
                *d = s * s;
            }
        }
        let mut var = vec![0.0; out_channels * ho * wo];
        gemm_strided(
            out_channels, rows, ho * wo, 1.0, &w2, rows as isize, 1, &col2, (ho * wo) as isize, 1, 0.0, &mut var,
            (ho * wo) as isize, 1,
        );
        for c in 0..out_channels {
            let dst = &mut out.data[c * ncols + noise_off..][..ho * wo];
            for (d, v) in dst.iter_mut().zip(&var[c * ho * wo..]) {
                *d = v.max(0.0).sqrt();
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]. The residual plane carries no gradient:
/// it never reaches the mixed output.
pub fn conv_backward(
    x: &PlaneTensor,
    weights: &[f64],
    dout: &PlaneTensor,
    k: Kernel,
    dweights: &mut [f64],
    dbias: &mut [f64],
    want_dx: bool,
) -> Option<PlaneTensor> {
    let (col, ho, wo) = im2col(x, k);
    let kk = k.size * k.size;
    let rows = x.channels * kk;
    let ncols = x.planes * ho * wo;
    let co = dout.channels;
    let lin = x.linear_planes() * ho * wo;
    gemm_strided(
        co, lin, rows, 1.0, &dout.data, ncols as isize, 1, &col, 1, ncols as isize, 1.0, dweights, rows as isize, 1,
    );
    bias_grad(dout, dbias);
    if !want_dx {
        return None;
    }
    let mut dcol = vec![0.0; rows * ncols];
    gemm_strided(
        rows, co, lin, 1.0, weights, 1, rows as isize, &dout.data, ncols as isize, 1, 0.0, &mut dcol, ncols as isize, 1,
    );
    let mut dx = PlaneTensor::zeros_like(x);
    col2im(&dcol, &mut dx, k, ho, wo, x.linear_planes());
    Some(dx)
}

/// 2x2 stride-2 transposed convolution with weights `[co][ky][kx][ci]`,
/// cropped to `out_h x out_w`.
pub fn tconv_forward(x: &PlaneTensor, weights: &[f64], bias: &[f64], out_channels: usize, out_h: usize, out_w: usize) -> PlaneTensor {
    let ci = x.channels;
    let (h, w) = (x.height, x.width);
    let cl = x.channel_len();
    let lin = x.linear_planes() * h * w;
    let rows = out_channels * 4;
    let mut t = vec![0.0; rows * lin];
    gemm_strided(rows, ci, lin, 1.0, weights, ci as isize, 1, &x.data, cl as isize, 1, 0.0, &mut t, lin as isize, 1);
    let mut out = PlaneTensor::zeros(x.kind, out_channels, x.planes, out_h, out_w);
    let scatter = |out: &mut PlaneTensor, t: &[f64], planes: std::ops::Range<usize>, tplanes_off: usize, f: &dyn Fn(f64) -> f64| {
        for c in 0..out_channels {
            for ky in 0..2 {
                for kx in 0..2 {
                    let trow = &t[(c * 4 + ky * 2 + kx) * (t.len() / rows)..];
                    for p in planes.clone() {
                        for y in 0..h {
                            let oy = 2 * y + ky;
                            if oy >= out_h {
                                break;
                            }
                            for xx in 0..w {
                                let ox = 2 * xx + kx;
                                if ox >= out_w {
                                    break;
                                }
                                let idx = out.index(c, p, oy, ox);
                                out.data[idx] = f(trow[(p - tplanes_off) * h * w + y * w + xx]);
                            }
                        }
                    }
                }
            }
        }
    };
    scatter(&mut out, &t, 0..x.linear_planes(), 0, &|v| v);
    add_bias(&mut out, bias);
    if x.kind == PlaneKind::Stat {
        let np = x.planes - 1;
        let w2: Vec<f64> = weights.iter().map(|v| v * v).collect();
        let mut n2 = vec![0.0; ci * h * w];
        for c in 0..ci {
            for (d, s) in n2[c * h * w..(c + 1) * h * w].iter_mut().zip(&x.data[c * cl + np * h * w..]) {
                *d = s * s;
            }
        }
        let mut tn = vec![0.0; rows * h * w];
        gemm_strided(rows, ci, h * w, 1.0, &w2, ci as isize, 1, &n2, (h * w) as isize, 1, 0.0, &mut tn, (h * w) as isize, 1);
        scatter(&mut out, &tn, np..np + 1, np, &|v: f64| v.max(0.0).sqrt());
    }
    out
}

pub fn tconv_backward(
    x: &PlaneTensor,
    weights: &[f64],
    dout: &PlaneTensor,
    dweights: &mut [f64],
    dbias: &mut [f64],
    want_dx: bool,
) -> Option<PlaneTensor> {
    let ci = x.channels;
    let co = dout.channels;
    let (h, w) = (x.height, x.width);
    let cl = x.channel_len();
    let lp = x.linear_planes();
    let lin = lp * h * w;
    let rows = co * 4;
    let mut dt = vec![0.0; rows * lin];
    for c in 0..co {
        for ky in 0..2 {
            for kx in 0..2 {
                let trow = &mut dt[(c * 4 + ky * 2 + kx) * lin..][..lin];
                for p in 0..lp {
                    for y in 0..h {
                        let oy = 2 * y + ky;
                        if oy >= dout.height {
                            break;
                        }
                        for xx in 0..w {
                            let ox = 2 * xx + kx;
                            if ox >= dout.width {
                                break;
                            }
                            trow[p * h * w + y * w + xx] = dout.data[dout.index(c, p, oy, ox)];
                        }
                    }
                }
            }
        }
    }
    gemm_strided(rows, lin, ci, 1.0, &dt, lin as isize, 1, &x.data, 1, cl as isize, 1.0, dweights, ci as isize, 1);
    bias_grad(dout, dbias);
    if !want_dx {
        return None;
    }
    let mut dx = PlaneTensor::zeros_like(x);
    gemm_strided(ci, rows, lin, 1.0, weights, 1, ci as isize, &dt, lin as isize, 1, 0.0, &mut dx.data, cl as isize, 1);
    Some(dx)
}

/// ReLU; statistical tensors gate whole cells on the mean plane.
/// Returns the output and the gate (per cell for stat, per element for det).
pub fn relu_forward(x: &PlaneTensor, force_open: bool) -> (PlaneTensor, Vec<bool>) {
    let mut out = x.clone();
    let pl = x.plane_len();
    match x.kind {
        PlaneKind::Stat => {
            let mut gate = vec![true; x.channels * pl];
            if !force_open {
                for c in 0..x.channels {
                    let base = c * x.channel_len();
                    for i in 0..pl {
                        if x.data[base + i] <= 0.0 {
                            gate[c * pl + i] = false;
                            for p in 0..x.planes {
                                out.data[base + p * pl + i] = 0.0;
                            }
                        }
                    }
                }
            }
            (out, gate)
        }
        PlaneKind::Det => {
            let mut gate = vec![true; x.data.len()];
            if !force_open {
                for (v, g) in out.data.iter_mut().zip(gate.iter_mut()) {
                    if *v <= 0.0 {
                        *v = 0.0;
                        *g = false;
                    }
                }
            }
            (out, gate)
        }
    }
}

pub fn relu_backward(dout: &PlaneTensor, gate: &[bool]) -> PlaneTensor {
    let mut dx = dout.clone();
    let pl = dout.plane_len();
    match dout.kind {
        PlaneKind::Stat => {
            for c in 0..dout.channels {
                let base = c * dout.channel_len();
                for i in 0..pl {
                    if !gate[c * pl + i] {
                        for p in 0..dout.planes {
                            dx.data[base + p * pl + i] = 0.0;
                        }
                    }
                }
            }
        }
        PlaneKind::Det => {
            for (v, &g) in dx.data.iter_mut().zip(gate) {
                if !g {
                    *v = 0.0;
                }
            }
        }
    }
    dx
}

pub fn concat_forward(parts: &[&PlaneTensor]) -> PlaneTensor {
    let first = parts[0];
    let channels = parts.iter().map(|p| p.channels).sum();
    let mut data = Vec::with_capacity(channels * first.channel_len());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    PlaneTensor { channels, height: first.height, width: first.width, planes: first.planes, kind: first.kind, data }
}

pub fn concat_backward(dout: &PlaneTensor, channels: &[usize]) -> Vec<PlaneTensor> {
    let cl = dout.channel_len();
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let t = PlaneTensor {
                channels: c,
                height: dout.height,
                width: dout.width,
                planes: dout.planes,
                kind: dout.kind,
                data: dout.data[start * cl..(start + c) * cl].to_vec(),
            };
            start += c;
            t
        })
        .collect()
}

/// Pixel position of outcome slot `j` of a cell, as `(frame, dy, dx)`.
#[inline]
fn slot(j: usize, patch: usize) -> (usize, usize, usize) {
    let nn = patch * patch;
    (j / nn, (j % nn) / patch, j % patch)
}

/// Mixes a statistical cell tensor into per-frame pixel maps
/// `[C, Hc n, Wc n, t]`; the residual plane is dropped.
pub fn mix_forward(x: &PlaneTensor, basis: &BasisSet, patch: usize) -> PlaneTensor {
    let d = basis.dim();
    let len = basis.len();
    let span = len / (patch * patch);
    let cells = x.plane_len();
    let b = mix_matrix(basis);
    let mut out = PlaneTensor::zeros(PlaneKind::Det, x.channels, span, x.height * patch, x.width * patch);
    let mut v = vec![0.0; cells * len];
    for c in 0..x.channels {
        let a = &x.data[c * x.channel_len()..];
        gemm_strided(cells, d + 1, len, 1.0, a, 1, cells as isize, &b, len as isize, 1, 0.0, &mut v, len as isize, 1);
        scatter_cells(&v, &mut out, c, x.height, x.width, patch);
    }
    out
}

pub fn mix_backward(x: &PlaneTensor, basis: &BasisSet, patch: usize, dout: &PlaneTensor) -> PlaneTensor {
    let d = basis.dim();
    let len = basis.len();
    let cells = x.plane_len();
    let b = mix_matrix(basis);
    let mut dx = PlaneTensor::zeros_like(x);
    let mut dv = vec![0.0; cells * len];
    let cl = dx.channel_len();
    for c in 0..x.channels {
        gather_cells(dout, &mut dv, c, x.height, x.width, patch);
        gemm_strided(
            d + 1, len, cells, 1.0, &b, len as isize, 1, &dv, 1, len as isize, 0.0, &mut dx.data[c * cl..],
            cells as isize, 1,
        );
    }
    dx
}

/// `[1; X_1; ..; X_d]`, `(d + 1) x len`.
fn mix_matrix(basis: &BasisSet) -> Vec<f64> {
    let len = basis.len();
    let mut b = vec![1.0; (basis.dim() + 1) * len];
    b[len..].copy_from_slice(basis.sources());
    b
}

fn scatter_cells(v: &[f64], out: &mut PlaneTensor, c: usize, hc: usize, wc: usize, patch: usize) {
    let len = v.len() / (hc * wc);
    for cy in 0..hc {
        for cx in 0..wc {
            let row = &v[(cy * wc + cx) * len..][..len];
            for (j, &val) in row.iter().enumerate() {
                let (f, dy, dx) = slot(j, patch);
                let idx = out.index(c, f, cy * patch + dy, cx * patch + dx);
                out.data[idx] = val;
            }
        }
    }
}

fn gather_cells(from: &PlaneTensor, v: &mut [f64], c: usize, hc: usize, wc: usize, patch: usize) {
    let len = v.len() / (hc * wc);
    for cy in 0..hc {
        for cx in 0..wc {
            let row = &mut v[(cy * wc + cx) * len..][..len];
            for (j, val) in row.iter_mut().enumerate() {
                let (f, dy, dx) = slot(j, patch);
                *val = from.data[from.index(c, f, cy * patch + dy, cx * patch + dx)];
            }
        }
    }
}

/// Deterministic cell tensor (planes = outcome slots) to per-frame pixel maps.
pub fn unfold_forward(x: &PlaneTensor, patch: usize) -> PlaneTensor {
    let span = x.planes / (patch * patch);
    let mut out = PlaneTensor::zeros(PlaneKind::Det, x.channels, span, x.height * patch, x.width * patch);
    for c in 0..x.channels {
        for j in 0..x.planes {
            let (f, dy, dx) = slot(j, patch);
            for cy in 0..x.height {
                for cx in 0..x.width {
                    let idx = out.index(c, f, cy * patch + dy, cx * patch + dx);
                    out.data[idx] = x.data[x.index(c, j, cy, cx)];
                }
            }
        }
    }
    out
}

pub fn unfold_backward(x: &PlaneTensor, patch: usize, dout: &PlaneTensor) -> PlaneTensor {
    let mut dx = PlaneTensor::zeros_like(x);
    for c in 0..x.channels {
        for j in 0..x.planes {
            let (f, dy, ddx) = slot(j, patch);
            for cy in 0..x.height {
                for cx in 0..x.width {
                    let idx = dx.index(c, j, cy, cx);
                    dx.data[idx] = dout.data[dout.index(c, f, cy * patch + dy, cx * patch + ddx)];
                }
            }
        }
    }
    dx
}

/// Per-frame pixel maps to a cell tensor with `n^2 t` outcome planes,
/// zero-padding the right/bottom borders.
pub fn fold(x: &PlaneTensor, patch: usize) -> PlaneTensor {
    let (hc, wc) = (x.height.div_ceil(patch), x.width.div_ceil(patch));
    let planes = x.planes * patch * patch;
    let mut out = PlaneTensor::zeros(PlaneKind::Det, x.channels, planes, hc, wc);
    for c in 0..x.channels {
        for j in 0..planes {
            let (f, dy, dx) = slot(j, patch);
            for cy in 0..hc {
                let y = cy * patch + dy;
                if y >= x.height {
                    break;
                }
                for cx in 0..wc {
                    let xx = cx * patch + dx;
                    if xx >= x.width {
                        break;
                    }
                    let idx = out.index(c, j, cy, cx);
                    out.data[idx] = x.data[x.index(c, f, y, xx)];
                }
            }
        }
    }
    out
}

/// Keeps the top-left `h x w` window.
pub fn crop_forward(x: &PlaneTensor, h: usize, w: usize) -> PlaneTensor {
    if x.height == h && x.width == w {
        return x.clone();
    }
    let mut out = PlaneTensor::zeros(x.kind, x.channels, x.planes, h, w);
    for c in 0..x.channels {
        for p in 0..x.planes {
            for y in 0..h {
                let src = x.index(c, p, y, 0);
                let dst = out.index(c, p, y, 0);
                out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
            }
        }
    }
    out
}

pub fn crop_backward(x: &PlaneTensor, dout: &PlaneTensor) -> PlaneTensor {
    if x.same_shape(dout) {
        return dout.clone();
    }
    let mut dx = PlaneTensor::zeros_like(x);
    for c in 0..x.channels {
        for p in 0..x.planes {
            for y in 0..dout.height {
                let src = dout.index(c, p, y, 0);
                let dst = dx.index(c, p, y, 0);
                dx.data[dst..dst + dout.width].copy_from_slice(&dout.data[src..src + dout.width]);
            }
        }
    }
    dx
}
