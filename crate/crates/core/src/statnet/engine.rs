//! Forward evaluation with an optional tape, and reverse-mode gradients.

use std::sync::Arc;

use rayon::prelude::*;

use super::graph::{LayerKind, LayerSpec, MixPoint, NetworkGraph};
use super::ops::{self, Kernel, PlaneKind, PlaneTensor};
use crate::canonical::{BasisSet, CanonicalFormGrid};
use crate::dataio::VideoVolume;
use crate::error::{Error, Result};

/// Input of one scale branch for a single `(snippet, z)` slice.
#[derive(Debug, Clone)]
pub enum BranchInput {
    /// One-channel statistical cell tensor and the basis it refers to.
    Stat { tensor: PlaneTensor, basis: Arc<BasisSet> },
    /// One-channel deterministic cell tensor with `n^2 t` outcome planes.
    Det { tensor: PlaneTensor },
}

impl BranchInput {
    fn tensor(&self) -> &PlaneTensor {
        match self {
            Self::Stat { tensor, .. } | Self::Det { tensor } => tensor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SliceInput {
    pub branches: Vec<BranchInput>,
    /// Output height and width in pixels.
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Test hook: every ReLU passes its input through unchanged.
    pub force_open_gates: bool,
    /// Fail on the first layer whose output is not finite.
    pub check_finite: bool,
}

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Conv { slot: usize, kernel: Kernel, x: Id, out: Id },
    TConv { slot: usize, x: Id, out: Id },
    Relu { out: Id, x: Id, gate: Vec<bool> },
    Concat { parts: Vec<Id>, out: Id },
    Mix { x: Id, out: Id, basis: Arc<BasisSet>, patch: usize },
    Unfold { x: Id, out: Id, patch: usize },
    Crop { x: Id, out: Id },
}

/// Recorded intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<PlaneTensor>,
    trainable: Vec<bool>,
    ops: Vec<Op>,
    output: Id,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Every ReLU gate of the pass, in execution order.
    pub fn gate_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let Op::Relu { gate, .. } = op {
                out.extend_from_slice(gate);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SliceOutput {
    /// `[classes, frames, height, width]`.
    pub logits: PlaneTensor,
    pub tape: Option<Tape>,
}

struct Exec<'g> {
    graph: &'g NetworkGraph,
    opts: ForwardOptions,
    values: Vec<PlaneTensor>,
    trainable: Vec<bool>,
    ops: Vec<Op>,
}

impl<'g> Exec<'g> {
    fn push(&mut self, t: PlaneTensor, trainable: bool, name: &str) -> Result<Id> {
        if self.opts.check_finite {
            if let Some(i) = t.first_non_finite() {
                return Err(Error::Numeric(format!("non-finite value at element {i} of layer {name}")));
            }
        }
        self.values.push(t);
        self.trainable.push(trainable);
        Ok(self.values.len() - 1)
    }

    fn conv(&mut self, layer: &LayerSpec, x: Id) -> Result<Id> {
        let slot_idx = layer.slot.expect("parameterized layer");
        let slot = &self.graph.layout[slot_idx];
        let kernel = match layer.kind {
            LayerKind::Conv3x3 => Kernel::CONV3,
            LayerKind::ConvDown => Kernel::DOWN3,
            LayerKind::Conv1x1 => Kernel::CONV1,
            _ => unreachable!(),
        };
        let input = &self.values[x];
        if input.channels != layer.in_channels {
            return Err(Error::dim(format!("{} expects {} channels, got {}", layer.name, layer.in_channels, input.channels)));
        }
        let p = &self.graph.params;
        let out = ops::conv_forward(input, &p[slot.weight_range()], &p[slot.bias_range()], layer.out_channels, kernel);
        let id = self.push(out, true, &layer.name)?;
        self.ops.push(Op::Conv { slot: slot_idx, kernel, x, out: id });
        Ok(id)
    }

    fn tconv(&mut self, layer: &LayerSpec, x: Id, h: usize, w: usize) -> Result<Id> {
        let slot_idx = layer.slot.expect("parameterized layer");
        let slot = &self.graph.layout[slot_idx];
        let p = &self.graph.params;
        let out = ops::tconv_forward(&self.values[x], &p[slot.weight_range()], &p[slot.bias_range()], layer.out_channels, h, w);
        let id = self.push(out, true, &layer.name)?;
        self.ops.push(Op::TConv { slot: slot_idx, x, out: id });
        Ok(id)
    }

    fn relu(&mut self, layer: &LayerSpec, x: Id) -> Result<Id> {
        let (out, gate) = ops::relu_forward(&self.values[x], self.opts.force_open_gates);
        let id = self.push(out, self.trainable[x], &layer.name)?;
        self.ops.push(Op::Relu { out: id, x, gate });
        Ok(id)
    }

    fn concat(&mut self, layer: &LayerSpec, parts: Vec<Id>) -> Result<Id> {
        let first = &self.values[parts[0]];
        if parts.iter().any(|&p| {
            let v = &self.values[p];
            v.kind != first.kind || v.planes != first.planes || v.height != first.height || v.width != first.width
        }) {
            return Err(Error::dim(format!("{}: concatenated features differ in shape", layer.name)));
        }
        let refs: Vec<&PlaneTensor> = parts.iter().map(|&p| &self.values[p]).collect();
        let out = ops::concat_forward(&refs);
        let tr = parts.iter().any(|&p| self.trainable[p]);
        let id = self.push(out, tr, &layer.name)?;
        self.ops.push(Op::Concat { parts, out: id });
        Ok(id)
    }

    fn to_pixels(&mut self, x: Id, input: &BranchInput, patch: usize, name: &str) -> Result<Id> {
        let v = &self.values[x];
        let (out, op) = match (v.kind, input) {
            (PlaneKind::Stat, BranchInput::Stat { basis, .. }) => {
                (ops::mix_forward(v, basis, patch), Op::Mix { x, out: 0, basis: basis.clone(), patch })
            }
            (PlaneKind::Det, _) => (ops::unfold_forward(v, patch), Op::Unfold { x, out: 0, patch }),
            _ => return Err(Error::Usage("statistical tensor without a basis".into())),
        };
        let id = self.push(out, self.trainable[x], name)?;
        self.ops.push(match op {
            Op::Mix { x, basis, patch, .. } => Op::Mix { x, out: id, basis, patch },
            Op::Unfold { x, patch, .. } => Op::Unfold { x, out: id, patch },
            _ => unreachable!(),
        });
        Ok(id)
    }

    fn crop(&mut self, x: Id, h: usize, w: usize, name: &str) -> Result<Id> {
        let v = &self.values[x];
        if v.height < h || v.width < w {
            return Err(Error::dim(format!("{name}: feature map {}x{} smaller than {h}x{w}", v.height, v.width)));
        }
        let out = ops::crop_forward(v, h, w);
        let id = self.push(out, self.trainable[x], name)?;
        self.ops.push(Op::Crop { x, out: id });
        Ok(id)
    }

    fn branch(&mut self, b: usize, input: &BranchInput, h: usize, w: usize) -> Result<Id> {
        let graph = self.graph;
        let br = &graph.branches[b];
        let patch = br.scale.patch;
        let t = input.tensor();
        if t.channels != 1 {
            return Err(Error::dim(format!("branch {b} input must have one channel")));
        }
        if matches!(input, BranchInput::Det { .. }) && t.planes % (patch * patch) != 0 {
            return Err(Error::dim(format!("branch {b}: {} planes are not a multiple of n^2 = {}", t.planes, patch * patch)));
        }
        if let BranchInput::Stat { basis, .. } = input {
            if basis.len() % (patch * patch) != 0 || t.planes != basis.dim() + 2 {
                return Err(Error::dim(format!("branch {b}: input does not match a patch-{patch} basis")));
            }
        }
        let mut x = self.push(t.clone(), false, "input")?;
        let mix_early = graph.config.mix_point == MixPoint::AfterDownTube;
        let mut skips = Vec::with_capacity(br.down.len());
        for blk in &br.down {
            x = self.conv(&blk.conv, x)?;
            x = self.relu(&blk.relu, x)?;
            skips.push(x);
            x = self.conv(&blk.down, x)?;
        }
        if mix_early {
            x = self.to_pixels(x, input, patch, &format!("s{b}.mix"))?;
        }
        x = self.conv(&br.center.conv, x)?;
        x = self.relu(&br.center.relu, x)?;
        for (l, up) in br.up.iter().enumerate().rev() {
            let mut s = skips[l];
            if mix_early {
                s = self.to_pixels(s, input, patch, &format!("s{b}.skip{l}.mix"))?;
            }
            let (sh, sw) = (self.values[s].height, self.values[s].width);
            x = self.tconv(&up.tconv, x, sh, sw)?;
            x = self.concat(&up.concat, vec![x, s])?;
            x = self.conv(&up.conv, x)?;
            x = self.relu(&up.relu, x)?;
        }
        if !mix_early {
            x = self.to_pixels(x, input, patch, &format!("s{b}.mix"))?;
        }
        self.crop(x, h, w, &format!("s{b}.crop"))
    }
}

/// Runs the network on one `(snippet, z)` slice.
pub fn forward_slice(graph: &NetworkGraph, input: &SliceInput, opts: ForwardOptions, record: bool) -> Result<SliceOutput> {
    if input.branches.len() != graph.branches.len() {
        return Err(Error::dim(format!("{} branch inputs for {} branches", input.branches.len(), graph.branches.len())));
    }
    let mut ex = Exec { graph, opts, values: Vec::new(), trainable: Vec::new(), ops: Vec::new() };
    let mut outs = Vec::with_capacity(input.branches.len());
    for (b, bi) in input.branches.iter().enumerate() {
        outs.push(ex.branch(b, bi, input.height, input.width)?);
    }
    let fe = &graph.final_eval;
    let mut x = ex.concat(&fe.concat, outs)?;
    x = ex.conv(&fe.conv, x)?;
    x = ex.relu(&fe.relu, x)?;
    x = ex.conv(&fe.classifier, x)?;
    let tape = record.then(|| Tape {
        values: std::mem::take(&mut ex.values),
        trainable: std::mem::take(&mut ex.trainable),
        ops: std::mem::take(&mut ex.ops),
        output: x,
    });
    let logits = match &tape {
        Some(t) => t.values[x].clone(),
        None => ex.values.swap_remove(x),
    };
    Ok(SliceOutput { logits, tape })
}

fn accumulate(slot: &mut Option<PlaneTensor>, g: PlaneTensor) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Gradient of the loss with respect to every parameter, in layout order.
pub fn backward(graph: &NetworkGraph, output: &SliceOutput, dlogits: &PlaneTensor) -> Result<Vec<f64>> {
    let tape = output.tape.as_ref().ok_or_else(|| Error::Usage("backward needs a forward pass recorded with a tape".into()))?;
    if !dlogits.same_shape(&tape.values[tape.output]) {
        return Err(Error::dim("loss gradient does not match the logits shape"));
    }
    let mut grads: Vec<Option<PlaneTensor>> = vec![None; tape.values.len()];
    grads[tape.output] = Some(dlogits.clone());
    let mut pg = vec![0.0; graph.params.len()];
    let p = &graph.params;
    for op in tape.ops.iter().rev() {
        match op {
            Op::Conv { slot, kernel, x, out } => {
                let Some(g) = grads[*out].take() else { continue };
                let s = &graph.layout[*slot];
                let (wr, br) = (s.weight_range(), s.bias_range());
                let (dw, db) = pg[s.offset..].split_at_mut(s.weights);
                let dx = ops::conv_backward(&tape.values[*x], &p[wr], &g, *kernel, dw, &mut db[..br.len()], tape.trainable[*x]);
                if let Some(dx) = dx {
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::TConv { slot, x, out } => {
                let Some(g) = grads[*out].take() else { continue };
                let s = &graph.layout[*slot];
                let (wr, br) = (s.weight_range(), s.bias_range());
                let (dw, db) = pg[s.offset..].split_at_mut(s.weights);
                let dx = ops::tconv_backward(&tape.values[*x], &p[wr], &g, dw, &mut db[..br.len()], tape.trainable[*x]);
                if let Some(dx) = dx {
                    accumulate(&mut grads[*x], dx);
                }
            }
            Op::Relu { out, x, gate } => {
                let Some(g) = grads[*out].take() else { continue };
                if tape.trainable[*x] {
                    accumulate(&mut grads[*x], ops::relu_backward(&g, gate));
                }
            }
            Op::Concat { parts, out } => {
                let Some(g) = grads[*out].take() else { continue };
                let ch: Vec<usize> = parts.iter().map(|&q| tape.values[q].channels).collect();
                for (&q, dq) in parts.iter().zip(ops::concat_backward(&g, &ch)) {
                    if tape.trainable[q] {
                        accumulate(&mut grads[q], dq);
                    }
                }
            }
            Op::Mix { x, out, basis, patch } => {
                let Some(g) = grads[*out].take() else { continue };
                if tape.trainable[*x] {
                    accumulate(&mut grads[*x], ops::mix_backward(&tape.values[*x], basis, *patch, &g));
                }
            }
            Op::Unfold { x, out, patch } => {
                let Some(g) = grads[*out].take() else { continue };
                if tape.trainable[*x] {
                    accumulate(&mut grads[*x], ops::unfold_backward(&tape.values[*x], *patch, &g));
                }
            }
            Op::Crop { x, out } => {
                let Some(g) = grads[*out].take() else { continue };
                if tape.trainable[*x] {
                    accumulate(&mut grads[*x], ops::crop_backward(&tape.values[*x], &g));
                }
            }
        }
    }
    Ok(pg)
}

/// Statistical cell tensor of slice `z` of a one-channel grid.
pub fn grid_slice(grid: &CanonicalFormGrid, z: usize) -> PlaneTensor {
    let [gx, gy, _] = grid.dims();
    let d = grid.basis().dim();
    let r = grid.slice_range(0, z);
    let cells = gx * gy;
    let mut t = PlaneTensor::zeros(PlaneKind::Stat, 1, d + 2, gy, gx);
    t.data[..cells].copy_from_slice(&grid.means()[r.clone()]);
    let coeffs = &grid.coeffs()[r.start * d..r.end * d];
    for (cell, row) in coeffs.chunks(d).enumerate() {
        for (i, &a) in row.iter().enumerate() {
            t.data[(i + 1) * cells + cell] = a;
        }
    }
    t.data[(d + 1) * cells..].copy_from_slice(&grid.noise()[r]);
    t
}

/// Mixed outcomes of slice `z` of a grid, as a deterministic cell tensor.
/// Column means are left out so that mixing stays linear.
pub fn mixed_grid_slice(grid: &CanonicalFormGrid, z: usize) -> PlaneTensor {
    let stat = grid_slice(grid, z);
    let basis = grid.basis();
    let patch = grid.geometry.patch;
    let pixels = ops::mix_forward(&stat, basis, patch);
    ops::fold(&pixels, patch)
}

/// Frames `frames` of slice `z`, as `[1, span, Y, X]`, zero past the end.
pub fn frame_stack(video: &VideoVolume, z: usize, frames: std::ops::Range<usize>, span: usize) -> PlaneTensor {
    let [x, y, _, _] = video.dims();
    let mut t = PlaneTensor::zeros(PlaneKind::Det, 1, span, y, x);
    for (k, f) in frames.enumerate().take(span) {
        t.data[k * x * y..(k + 1) * x * y].copy_from_slice(video.frame(z, f));
    }
    t
}

pub fn stat_input(grids: &[CanonicalFormGrid], z: usize, height: usize, width: usize) -> SliceInput {
    SliceInput {
        branches: grids
            .iter()
            .map(|g| BranchInput::Stat { tensor: grid_slice(g, z), basis: g.basis().clone() })
            .collect(),
        height,
        width,
    }
}

/// Folds one frame stack into every branch's cell layout.
pub fn det_input(graph: &NetworkGraph, frames: &PlaneTensor) -> SliceInput {
    SliceInput {
        branches: graph
            .branches
            .iter()
            .map(|br| BranchInput::Det { tensor: ops::fold(frames, br.scale.patch) })
            .collect(),
        height: frames.height,
        width: frames.width,
    }
}

/// Per-frame class scores of a whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    /// `[X, Y, Z, T]`.
    pub dims: [usize; 4],
    pub classes: usize,
    /// Index `(((t Z + z) C + c) Y + y) X + x`.
    pub data: Vec<f64>,
}

impl Logits {
    pub fn zeros(dims: [usize; 4], classes: usize) -> Self {
        Self { dims, classes, data: vec![0.0; dims.iter().product::<usize>() * classes] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, t: usize, c: usize) -> usize {
        let [nx, ny, nz, _] = self.dims;
        (((t * nz + z) * self.classes + c) * ny + y) * nx + x
    }

    /// Writes the first `frames.len()` planes of a slice output at `z`.
    pub fn store(&mut self, z: usize, frames: std::ops::Range<usize>, out: &PlaneTensor) {
        let [nx, ny, _, _] = self.dims;
        for (k, t) in frames.enumerate() {
            for c in 0..self.classes {
                let dst = self.index(0, 0, z, t, c);
                let src = out.index(c, k, 0, 0);
                self.data[dst..dst + nx * ny].copy_from_slice(&out.data[src..src + nx * ny]);
            }
        }
    }

    /// Hard labels `[X, Y, Z, T]` in voxel order.
    pub fn argmax(&self) -> Vec<u8> {
        let [nx, ny, nz, nt] = self.dims;
        let mut labels = vec![0u8; nx * ny * nz * nt];
        for t in 0..nt {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut best = 0;
                        let mut bv = f64::NEG_INFINITY;
                        for c in 0..self.classes {
                            let v = self.data[self.index(x, y, z, t, c)];
                            if v > bv {
                                bv = v;
                                best = c;
                            }
                        }
                        labels[((t * nz + z) * ny + y) * nx + x] = best as u8;
                    }
                }
            }
        }
        labels
    }
}

/// Runs the statistical pipeline over every snippet; `grids[s][b]` is the
/// grid of snippet `s` for branch `b`.
pub fn forward_stat(graph: &NetworkGraph, grids: &[Vec<CanonicalFormGrid>], dims: [usize; 4], opts: ForwardOptions) -> Result<Logits> {
    let span = grids
        .first()
        .and_then(|g| g.first())
        .map(|g| g.geometry.span)
        .ok_or_else(|| Error::dim("no grids to evaluate"))?;
    let nz = dims[2];
    let jobs: Vec<(usize, usize)> = (0..grids.len()).flat_map(|s| (0..nz).map(move |z| (s, z))).collect();
    let outs: Vec<PlaneTensor> = jobs
        .par_iter()
        .map(|&(s, z)| forward_slice(graph, &stat_input(&grids[s], z, dims[1], dims[0]), opts, false).map(|o| o.logits))
        .collect::<Result<_>>()?;
    let mut logits = Logits::zeros(dims, graph.config.num_classes);
    for (&(s, z), out) in jobs.iter().zip(&outs) {
        let frames = s * span..((s + 1) * span).min(dims[3]);
        logits.store(z, frames, out);
    }
    Ok(logits)
}

/// Runs every layer deterministically on the frames, `span` frames at a time.
pub fn forward_det(graph: &NetworkGraph, video: &VideoVolume, span: usize, opts: ForwardOptions) -> Result<Logits> {
    let dims = video.dims();
    let span = span.max(1);
    let snippets = dims[3].div_ceil(span);
    let jobs: Vec<(usize, usize)> = (0..snippets).flat_map(|s| (0..dims[2]).map(move |z| (s, z))).collect();
    let outs: Vec<PlaneTensor> = jobs
        .par_iter()
        .map(|&(s, z)| {
            let frames = s * span..((s + 1) * span).min(dims[3]);
            let stack = frame_stack(video, z, frames, span);
            forward_slice(graph, &det_input(graph, &stack), opts, false).map(|o| o.logits)
        })
        .collect::<Result<_>>()?;
    let mut logits = Logits::zeros(dims, graph.config.num_classes);
    for (&(s, z), out) in jobs.iter().zip(&outs) {
        logits.store(z, s * span..((s + 1) * span).min(dims[3]), out);
    }
    Ok(logits)
}
