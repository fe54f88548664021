//! Segmentation loss, SGD training loop and Dice evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::canonical::CanonicalFormGrid;
use crate::dataio::{MaskVolume, VideoVolume, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ica::IcaConfig;
use crate::sampler::{extract_multiscale, normalize};
use crate::statnet::{
    backward, det_input, forward_det, forward_slice, forward_stat, frame_stack, save_checkpoint, stat_input, ForwardOptions,
    Logits, NetworkGraph, PlaneTensor, SliceInput, SliceOutput,
};

/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Training units (snippet, z-slice) per optimizer step.
    pub batch_snippets: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Frames per training unit for frame-wise graphs.
    pub frames_per_unit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_snippets: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
            frames_per_unit: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.loss_weights;
        if self.epochs == 0 || self.batch_snippets == 0 || self.frames_per_unit == 0 {
            return Err(Error::config("epochs, batch_snippets and frames_per_unit must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning rate must be finite and non-negative, momentum in [0, 1)"));
        }
        if w.ce < 0.0 || w.dice < 0.0 || w.ce + w.dice <= 0.0 {
            return Err(Error::config("loss weights must be non-negative with a positive sum"));
        }
        Ok(())
    }
}

/// Cross-entropy plus soft-Dice loss of logits `[C, frames, Y, X]` against
/// `labels` (`frames x Y x X`). Only the first `labels.len() / (Y X)`
/// planes take part; the gradient is zero elsewhere.
pub fn loss(logits: &PlaneTensor, labels: &[u8], weights: LossWeights) -> Result<(f64, PlaneTensor)> {
    let c = logits.channels;
    let pl = logits.plane_len();
    if pl == 0 || labels.len() % pl != 0 || labels.len() / pl > logits.planes {
        return Err(Error::dim("labels do not match the logit planes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let n = labels.len();
    // softmax per voxel
    let mut prob = vec![0.0; c * n];
    let at = |ch: usize, v: usize| ch * logits.channel_len() + v;
    for v in 0..n {
        let m = (0..c).map(|k| logits.data[at(k, v)]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for k in 0..c {
            let e = (logits.data[at(k, v)] - m).exp();
            prob[k * n + v] = e;
            s += e;
        }
        for k in 0..c {
            prob[k * n + v] /= s;
        }
    }
    let mut ce = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        ce -= prob[l as usize * n + v].max(f64::MIN_POSITIVE).ln();
    }
    ce /= n as f64;
    // dL/dp for the Dice term, foreground classes 1..C
    let fg = c.saturating_sub(1).max(1);
    let mut dice_sum = 0.0;
    let mut dprob = vec![0.0; c * n];
    for k in 1..c {
        let p = &prob[k * n..(k + 1) * n];
        let (mut inter, mut sum) = (0.0, 0.0);
        for (v, &l) in labels.iter().enumerate() {
            let g = (l as usize == k) as u8 as f64;
            inter += p[v] * g;
            sum += p[v] + g;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sum + DICE_EPS;
        dice_sum += num / den;
        let scale = -weights.dice / fg as f64;
        for (v, &l) in labels.iter().enumerate() {
            let g = (l as usize == k) as u8 as f64;
            dprob[k * n + v] = scale * (2.0 * g * den - num) / (den * den);
        }
    }
    let dice_term = if c > 1 { 1.0 - dice_sum / fg as f64 } else { 0.0 };
    let value = weights.ce * ce + weights.dice * dice_term;
    let mut grad = PlaneTensor::zeros_like(logits);
    for (v, &l) in labels.iter().enumerate() {
        let dot: f64 = (0..c).map(|k| prob[k * n + v] * dprob[k * n + v]).sum();
        for k in 0..c {
            let p = prob[k * n + v];
            let ce_g = weights.ce * (p - (l as usize == k) as u8 as f64) / n as f64;
            grad.data[at(k, v)] = ce_g + p * (dprob[k * n + v] - dot);
        }
    }
    Ok((value, grad))
}

/// Dice of one class: `2|A & B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (pp, tt) = (p == class, t == class);
        inter += (pp && tt) as usize;
        a += pp as usize;
        b += tt as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// RV, MYO and LV Dice of a labelling.
pub fn class_dice(pred: &[u8], truth: &[u8]) -> [f64; 3] {
    [dice(pred, truth, 1), dice(pred, truth, 2), dice(pred, truth, 3)]
}

/// A case ready for training or evaluation: normalized video, mask and,
/// for statistical graphs, the collapsed grids `grids[snippet][scale]`.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub video: VideoVolume,
    pub mask: MaskVolume,
    pub grids: Option<Vec<Vec<CanonicalFormGrid>>>,
    pub span: usize,
}

impl PreparedCase {
    pub fn snippets(&self) -> usize {
        self.video.dims()[3].div_ceil(self.span)
    }

    fn frames(&self, s: usize) -> std::ops::Range<usize> {
        s * self.span..((s + 1) * self.span).min(self.video.dims()[3])
    }

    fn unit_input(&self, graph: &NetworkGraph, s: usize, z: usize) -> SliceInput {
        let [x, y, _, _] = self.video.dims();
        match &self.grids {
            Some(g) => stat_input(&g[s], z, y, x),
            None => det_input(graph, &frame_stack(&self.video, z, self.frames(s), self.span)),
        }
    }

    fn unit_labels(&self, s: usize, z: usize) -> Vec<u8> {
        self.frames(s).flat_map(|t| self.mask.frame(z, t).iter().copied()).collect()
    }
}

pub fn prepare(graph: &NetworkGraph, cases: &[(VideoVolume, MaskVolume)], ica: &IcaConfig, frames_per_unit: usize) -> Result<Vec<PreparedCase>> {
    cases
        .iter()
        .map(|(v, m)| {
            if v.dims() != m.dims() {
                return Err(Error::dim(format!("video {:?} and mask {:?} differ in shape", v.dims(), m.dims())));
            }
            let (video, _) = normalize(v);
            if graph.config.statistical {
                let ex = extract_multiscale(&video, &graph.config.scales, ica)?;
                Ok(PreparedCase { video, mask: m.clone(), grids: Some(ex.grids), span: ex.plan.span })
            } else {
                Ok(PreparedCase { video, mask: m.clone(), grids: None, span: frames_per_unit })
            }
        })
        .collect()
}

fn units(cases: &[PreparedCase]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (c, case) in cases.iter().enumerate() {
        for s in 0..case.snippets() {
            for z in 0..case.video.dims()[2] {
                out.push((c, s, z));
            }
        }
    }
    out
}

fn unit_step(graph: &NetworkGraph, case: &PreparedCase, s: usize, z: usize, w: LossWeights, record: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let input = case.unit_input(graph, s, z);
    let out: SliceOutput = forward_slice(graph, &input, ForwardOptions::default(), record)?;
    let (value, dlogits) = loss(&out.logits, &case.unit_labels(s, z), w)?;
    if !value.is_finite() {
        // rerun with checks to name the first non-finite layer
        forward_slice(graph, &input, ForwardOptions { check_finite: true, ..Default::default() }, false)?;
        return Err(Error::Numeric("non-finite loss with finite logits".into()));
    }
    let grad = if record { Some(backward(graph, &out, &dlogits)?) } else { None };
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub dice: [f64; 3],
    pub dice_mean: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,dice_rv,dice_myo,dice_lv,dice_mean";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.val_loss, r.dice[0], r.dice[1], r.dice[2], r.dice_mean
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation Dice.
    pub best: NetworkGraph,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: NetworkGraph,
    pub metrics: Vec<EpochMetrics>,
}

/// Mean loss over every unit of `cases` without recording tapes.
pub fn mean_loss(graph: &NetworkGraph, cases: &[PreparedCase], w: LossWeights) -> Result<f64> {
    let us = units(cases);
    let losses: Vec<f64> = us
        .par_iter()
        .map(|&(c, s, z)| unit_step(graph, &cases[c], s, z, w, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// SGD with momentum over shuffled (snippet, z) units. Writes the metrics
/// CSV, the best checkpoint and periodic checkpoints when `out_dir` is set.
pub fn train(
    mut graph: NetworkGraph,
    train_cases: &[PreparedCase],
    val_cases: &[PreparedCase],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::config("training needs nonempty train and validation splits"));
    }
    let mut order = units(train_cases);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; graph.params.len()];
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NetworkGraph)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_snippets) {
            let results: Vec<(f64, Option<Vec<f64>>)> = batch
                .par_iter()
                .map(|&(c, s, z)| unit_step(&graph, &train_cases[c], s, z, cfg.loss_weights, true))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; graph.params.len()];
            for (l, g) in &results {
                total += l;
                for (a, b) in grad.iter_mut().zip(g.as_ref().expect("recorded")) {
                    *a += b;
                }
            }
            for ((p, v), g) in graph.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g * scale;
                *p += *v;
            }
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(&graph, val_cases, cfg.loss_weights)?;
        let report = evaluate(&graph, val_cases)?;
        metrics.push(EpochMetrics { epoch, train_loss, val_loss, dice: report.mean, dice_mean: report.mean_dice });
        if best.as_ref().is_none_or(|b| report.mean_dice > b.0) {
            best = Some((report.mean_dice, epoch, graph.clone()));
        }
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&graph, &dir.join(format!("epoch{epoch:03}.msun")))?;
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    if let Some(dir) = out_dir {
        save_checkpoint(&best, &dir.join("best.msun"))?;
    }
    Ok(TrainOutcome { best, best_epoch, last: graph, metrics })
}

/// Per-case Dice with mean and standard deviation across cases.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_case: Vec<[f64; 3]>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub mean_dice: f64,
    /// Spread of the per-case class-averaged Dice.
    pub mean_dice_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 { xs.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl DiceReport {
    pub fn from_cases(per_case: Vec<[f64; 3]>) -> Self {
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for k in 0..3 {
            (mean[k], std[k]) = mean_std(per_case.iter().map(|d| d[k]));
        }
        let (mean_dice, mean_dice_std) = mean_std(per_case.iter().map(|d| d.iter().sum::<f64>() / 3.0));
        Self { per_case, mean, std, mean_dice, mean_dice_std }
    }

    /// `RV MYO LV Average` as `.862±.011` cells.
    pub fn table_row(&self) -> [String; 4] {
        [
            table_cell(self.mean[0], self.std[0]),
            table_cell(self.mean[1], self.std[1]),
            table_cell(self.mean[2], self.std[2]),
            table_cell(self.mean_dice, self.mean_dice_std),
        ]
    }
}

pub fn table_cell(mean: f64, std: f64) -> String {
    let short = |v: f64| {
        let s = format!("{v:.3}");
        s.strip_prefix('0').map(str::to_owned).unwrap_or(s)
    };
    format!("{}±{}", short(mean), short(std))
}

pub fn predict_case(graph: &NetworkGraph, case: &PreparedCase) -> Result<Logits> {
    match &case.grids {
        Some(g) => forward_stat(graph, g, case.video.dims(), ForwardOptions::default()),
        None => forward_det(graph, &case.video, case.span, ForwardOptions::default()),
    }
}

/// Hard-argmax Dice per foreground class for every case.
pub fn evaluate(graph: &NetworkGraph, cases: &[PreparedCase]) -> Result<DiceReport> {
    let per_case = cases
        .iter()
        .map(|c| {
            let labels = predict_case(graph, c)?.argmax();
            Ok(class_dice(&labels, c.mask.labels()))
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(NUM_CLASSES == 4);
    Ok(DiceReport::from_cases(per_case))
}
