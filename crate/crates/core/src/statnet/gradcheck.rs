//! Finite-difference verification of the tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{backward, det_input, forward_slice, frame_stack, stat_input, ForwardOptions, SliceInput};
use super::graph::{GraphConfig, MixPoint, NetworkGraph};
use super::ops::PlaneTensor;
use crate::dataio::VideoVolume;
use crate::error::Result;
use crate::ica::{Decomposition, IcaConfig};
use crate::sampler::{extract_multiscale, ScaleSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Probes skipped because a ReLU gate flipped within `+-h`.
    pub skipped: usize,
    pub worst_relative_error: f64,
    /// Worst relative error per parameter slot.
    pub per_slot: Vec<(String, f64)>,
}

/// Compares central differences against [`backward`] on `probes` random
/// weights plus the first bias of every slot. `loss` maps logits to the loss
/// value and its gradient.
pub fn gradient_check<F>(
    graph: &NetworkGraph,
    input: &SliceInput,
    loss: F,
    h: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&PlaneTensor) -> (f64, PlaneTensor),
{
    let opts = ForwardOptions { force_open_gates: false, check_finite: true };
    let out = forward_slice(graph, input, opts, true)?;
    let base_gates = out.tape.as_ref().map(|t| t.gate_pattern()).unwrap_or_default();
    let (_, dlogits) = loss(&out.logits);
    let grad = backward(graph, &out, &dlogits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = graph.clone();
    let eval = |g: &NetworkGraph| -> Result<(f64, bool)> {
        let o = forward_slice(g, input, opts, true)?;
        let same = o.tape.as_ref().map(|t| t.gate_pattern()).unwrap_or_default() == base_gates;
        Ok((loss(&o.logits).0, same))
    };
    let mut report = GradCheckReport { checked: 0, skipped: 0, worst_relative_error: 0.0, per_slot: Vec::new() };
    for slot in &graph.layout {
        let mut idx: Vec<usize> = (0..probes).map(|_| slot.offset + rng.random_range(0..slot.weights)).collect();
        idx.push(slot.bias_range().start);
        let mut worst: f64 = 0.0;
        for i in idx {
            let orig = g.params[i];
            g.params[i] = orig + h;
            let (up, same_up) = eval(&g)?;
            g.params[i] = orig - h;
            let (dn, same_dn) = eval(&g)?;
            g.params[i] = orig;
            if !(same_up && same_dn) {
                report.skipped += 1;
                continue;
            }
            let num = (up - dn) / (2.0 * h);
            let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
            report.checked += 1;
        }
        report.worst_relative_error = report.worst_relative_error.max(worst);
        report.per_slot.push((slot.name.clone(), worst));
    }
    Ok(report)
}

/// Audit result for one graph of [`audit`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub name: String,
    pub params: usize,
    pub report: GradCheckReport,
}

/// Gradient audit over tiny graphs covering every layer kind: a two-scale
/// statistical net mixed after the down tubes, the same mixed after the up
/// tubes, and a frame-wise U-Net. The loss is a fixed random linear
/// functional of the logits.
pub fn audit(h: f64, probes: usize, seed: u64) -> Result<Vec<AuditEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [12, 12, 2, 2];
    let voxels = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let video = VideoVolume::new(dims, voxels)?;
    let scales = vec![ScaleSpec::new(2, 2, 2)?, ScaleSpec::new(4, 2, 1)?];
    let pca = IcaConfig { method: Decomposition::Pca, ..IcaConfig::default() };
    let ex = extract_multiscale(&video, &scales, &pca)?;
    let mut out = Vec::new();
    for (name, mix) in [("msunet_after_dt", MixPoint::AfterDownTube), ("msunet_after_ut", MixPoint::AfterUpTube)] {
        let mut cfg = GraphConfig::msunet(scales.clone(), 2, 1, 3, mix);
        cfg.seed = seed;
        let graph = NetworkGraph::build(cfg)?;
        let input = stat_input(&ex.grids[0], 1, dims[1], dims[0]);
        out.push(audit_one(name, &graph, &input, h, probes, &mut rng)?);
    }
    let mut cfg = GraphConfig::unet(3, 2, 3);
    cfg.seed = seed;
    let unet = NetworkGraph::build(cfg)?;
    let input = det_input(&unet, &frame_stack(&video, 0, 0..2, 2));
    out.push(audit_one("unet", &unet, &input, h, probes, &mut rng)?);
    Ok(out)
}

fn audit_one(name: &str, graph: &NetworkGraph, input: &SliceInput, h: f64, probes: usize, rng: &mut ChaCha8Rng) -> Result<AuditEntry> {
    let out = forward_slice(graph, input, ForwardOptions::default(), false)?;
    let mut r = out.logits.clone();
    r.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let loss = |l: &PlaneTensor| (l.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>(), r.clone());
    let report = gradient_check(graph, input, loss, h, probes, rng.random())?;
    Ok(AuditEntry { name: name.to_string(), params: graph.param_count(), report })
}
