//! End-to-end inference on a raw video with per-stage timers.

use std::time::{Duration, Instant};

use crate::dataio::VideoVolume;
use crate::error::Result;
use crate::ica::IcaConfig;
use crate::sampler::{extract_multiscale, normalize};
use crate::statnet::{forward_det, forward_stat, ForwardOptions, Logits, NetworkGraph};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub normalize: Duration,
    /// Patch gathering and basis fitting; zero for the frame pipeline.
    pub extract: Duration,
    /// Network layers including mixing.
    pub forward: Duration,
    /// Argmax over class scores.
    pub postprocess: Duration,
    pub total: Duration,
}

impl StageTimes {
    pub fn stage_sum(&self) -> Duration {
        self.normalize + self.extract + self.forward + self.postprocess
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Logits,
    /// Hard labels in voxel order.
    pub labels: Vec<u8>,
    pub times: StageTimes,
}

/// Normalizes `video`, collapses it when the graph is statistical, runs the
/// network and takes the per-voxel argmax. `det_span` frames are batched per
/// pass in the frame pipeline.
pub fn predict(graph: &NetworkGraph, video: &VideoVolume, ica: &IcaConfig, det_span: usize) -> Result<Prediction> {
    run(graph, video, ica, det_span, graph.config.statistical)
}

/// Frame-by-frame inference with the same layers, skipping the collapse even
/// for a statistical graph.
pub fn predict_framewise(graph: &NetworkGraph, video: &VideoVolume, det_span: usize) -> Result<Prediction> {
    run(graph, video, &IcaConfig::default(), det_span, false)
}

fn run(graph: &NetworkGraph, video: &VideoVolume, ica: &IcaConfig, det_span: usize, collapse: bool) -> Result<Prediction> {
    let start = Instant::now();
    let (norm, _) = normalize(video);
    let t_norm = start.elapsed();
    let (logits, t_extract, t_forward) = if collapse {
        let t0 = Instant::now();
        let ex = extract_multiscale(&norm, &graph.config.scales, ica)?;
        let t1 = Instant::now();
        let logits = forward_stat(graph, &ex.grids, norm.dims(), ForwardOptions::default())?;
        (logits, t1 - t0, t1.elapsed())
    } else {
        let t0 = Instant::now();
        let logits = forward_det(graph, &norm, det_span, ForwardOptions::default())?;
        (logits, Duration::ZERO, t0.elapsed())
    };
    let t0 = Instant::now();
    let labels = logits.argmax();
    let t_post = t0.elapsed();
    let times = StageTimes { normalize: t_norm, extract: t_extract, forward: t_forward, postprocess: t_post, total: start.elapsed() };
    Ok(Prediction { logits, labels, times })
}
