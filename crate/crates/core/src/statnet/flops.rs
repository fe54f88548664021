//! Multiply-accumulate counts of the statistical pipeline and of the
//! matched frame-by-frame pipeline.

use super::graph::{LayerSpec, MixPoint, Mode, NetworkGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub stat_macs: u64,
    pub det_macs: u64,
}

impl LayerCost {
    pub fn ratio(&self) -> f64 {
        self.det_macs as f64 / self.stat_macs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub layers: Vec<LayerCost>,
    /// Layer MACs of the statistical pipeline per snippet.
    pub stat_macs: u64,
    /// Layer MACs of the deterministic pipeline per snippet.
    pub det_macs: u64,
    /// MACs spent turning canonical forms into samples per snippet.
    pub mix_macs: u64,
    /// `det_macs / stat_macs`.
    pub analytic_ratio: f64,
}

struct Walk {
    layers: Vec<LayerCost>,
    mix: u64,
}

impl Walk {
    /// `per_plane` MACs of one plane; the layer runs on `stat` planes in the
    /// statistical pipeline and `det` planes in the deterministic one.
    fn add(&mut self, layer: &LayerSpec, per_plane: u64, stat: u64, det: u64) {
        self.layers.push(LayerCost { name: layer.name.clone(), stat_macs: per_plane * stat, det_macs: per_plane * det });
    }
}

fn conv3(l: &LayerSpec, h: usize, w: usize) -> u64 {
    (l.out_channels * l.in_channels * 9 * h * w) as u64
}

/// Counts for one `(snippet)` of a `[X, Y, Z, T]` video at the graph's scales.
pub fn flop_count(graph: &NetworkGraph, dims: [usize; 4]) -> FlopReport {
    let [nx, ny, nz, _] = dims;
    let mut walk = Walk { layers: Vec::new(), mix: 0 };
    let late = graph.config.mix_point == MixPoint::AfterUpTube;
    let mut span = 1;
    for br in &graph.branches {
        let s = br.scale;
        let (n, t) = (s.patch, s.span);
        span = t;
        let outcomes = (n * n * t) as u64;
        let stat_planes = |l: &LayerSpec| if l.mode == Mode::Statistical { (s.dim + 2) as u64 } else { outcomes };
        let mix_cost = |c: usize, h: usize, w: usize| (c * h * w * (s.dim + 1) * n * n * t) as u64;
        let (mut h, mut w) = (ny.div_ceil(n), nx.div_ceil(n));
        let mut sizes = Vec::new();
        for blk in &br.down {
            walk.add(&blk.conv, conv3(&blk.conv, h, w), stat_planes(&blk.conv), outcomes);
            sizes.push((h, w));
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            walk.add(&blk.down, conv3(&blk.down, ho, wo), stat_planes(&blk.down), outcomes);
            (h, w) = (ho, wo);
        }
        // in pixel space after mixing, planes are frames and sizes scale by n
        let (scale, planes_after) = if late { (1, None) } else { (n, Some(t as u64)) };
        let mixed = |l: &LayerSpec| planes_after.map_or((stat_planes(l), outcomes), |p| (p, p));
        if !late && graph.config.statistical {
            walk.mix += mix_cost(br.center.conv.in_channels, h, w);
            for (blk, &(sh, sw)) in br.down.iter().zip(&sizes) {
                walk.mix += mix_cost(blk.conv.out_channels, sh, sw);
            }
        }
        let (hc, wc) = (h * scale, w * scale);
        let (a, b) = mixed(&br.center.conv);
        walk.add(&br.center.conv, conv3(&br.center.conv, hc, wc), a, b);
        for (l, up) in br.up.iter().enumerate().rev() {
            let (sh, sw) = (sizes[l].0 * scale, sizes[l].1 * scale);
            let (a, b) = mixed(&up.tconv);
            walk.add(&up.tconv, (up.tconv.out_channels * up.tconv.in_channels * sh * sw) as u64, a, b);
            let (a, b) = mixed(&up.conv);
            walk.add(&up.conv, conv3(&up.conv, sh, sw), a, b);
        }
        if late && graph.config.statistical {
            let c0 = br.up.first().map_or(br.center.conv.out_channels, |u| u.conv.out_channels);
            walk.mix += mix_cost(c0, ny.div_ceil(n), nx.div_ceil(n));
        }
    }
    let fe = &graph.final_eval;
    let t = span as u64;
    walk.add(&fe.conv, conv3(&fe.conv, ny, nx), t, t);
    walk.add(&fe.classifier, (fe.classifier.out_channels * fe.classifier.in_channels * ny * nx) as u64, t, t);
    let z = nz as u64;
    for l in &mut walk.layers {
        l.stat_macs *= z;
        l.det_macs *= z;
    }
    let stat_macs = walk.layers.iter().map(|l| l.stat_macs).sum();
    let det_macs = walk.layers.iter().map(|l| l.det_macs).sum();
    FlopReport {
        layers: walk.layers,
        stat_macs,
        det_macs,
        mix_macs: walk.mix * z,
        analytic_ratio: det_macs as f64 / stat_macs as f64,
    }
}
