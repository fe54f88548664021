//! Throughput measurement and the method comparison report.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::dataio::{MaskVolume, VideoVolume};
use crate::error::{Error, Result};
use crate::ica::IcaConfig;
use crate::pipeline::{predict, predict_framewise, StageTimes};
use crate::statnet::{flop_count, NetworkGraph};
use crate::trainer::{evaluate, prepare, DiceReport};

pub const WARMUP_PASSES: usize = 2;
pub const DEFAULT_REPEATS: usize = 5;
pub const REPORT_HEADER: &str = "method,fps,fps_ci,dice_rv,dice_myo,dice_lv,dice_mean,flop_ratio,r,t,threads";

#[derive(Debug, Clone, PartialEq)]
pub struct FpsMeasurement {
    pub fps: f64,
    /// 95% half-width over the per-run rates.
    pub fps_ci: f64,
    pub frames: usize,
    pub median_seconds: f64,
    pub run_seconds: Vec<f64>,
    /// Coefficient of variation of the per-run rates.
    pub cv: f64,
    /// Stage timers summed over the videos of the median run.
    pub stages: StageTimes,
    /// Pipeline timer of the median run.
    pub total: Duration,
    pub threads: usize,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Frames per second of the full pipeline (normalization, collapsing when
/// statistical, network, argmax) over `videos`, median of `repeats` runs after
/// two discarded passes.
pub fn measure_fps(graph: &NetworkGraph, videos: &[VideoVolume], ica: &IcaConfig, det_span: usize, repeats: usize) -> Result<FpsMeasurement> {
    measure(graph, videos, ica, det_span, repeats, false)
}

/// [`measure_fps`] of the frame-by-frame route through the same graph: the
/// matched-architecture baseline of a statistical graph.
pub fn measure_fps_framewise(graph: &NetworkGraph, videos: &[VideoVolume], det_span: usize, repeats: usize) -> Result<FpsMeasurement> {
    measure(graph, videos, &IcaConfig::default(), det_span, repeats, true)
}

fn measure(graph: &NetworkGraph, videos: &[VideoVolume], ica: &IcaConfig, det_span: usize, repeats: usize, framewise: bool) -> Result<FpsMeasurement> {
    if videos.is_empty() || repeats == 0 {
        return Err(Error::config("throughput needs at least one video and one repeat"));
    }
    let frames: usize = videos.iter().map(|v| v.dims()[2] * v.dims()[3]).sum();
    let run = || -> Result<(Duration, StageTimes)> {
        let start = Instant::now();
        let mut stages = StageTimes::default();
        for v in videos {
            let p = if framewise { predict_framewise(graph, v, det_span)? } else { predict(graph, v, ica, det_span)? };
            stages.normalize += p.times.normalize;
            stages.extract += p.times.extract;
            stages.forward += p.times.forward;
            stages.postprocess += p.times.postprocess;
            stages.total += p.times.total;
        }
        Ok((start.elapsed(), stages))
    };
    for _ in 0..WARMUP_PASSES {
        run()?;
    }
    let runs: Vec<(Duration, StageTimes)> = (0..repeats).map(|_| run()).collect::<Result<_>>()?;
    let secs: Vec<f64> = runs.iter().map(|r| r.0.as_secs_f64()).collect();
    let med = median(&secs);
    let median_run = runs.iter().min_by(|a, b| (a.0.as_secs_f64() - med).abs().total_cmp(&(b.0.as_secs_f64() - med).abs())).unwrap();
    let rates: Vec<f64> = secs.iter().map(|s| frames as f64 / s).collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let sd = if rates.len() > 1 { (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(FpsMeasurement {
        fps: frames as f64 / med,
        fps_ci: 1.96 * sd / n.sqrt(),
        frames,
        median_seconds: med,
        run_seconds: secs,
        cv: sd / mean,
        stages: median_run.1,
        total: median_run.0,
        threads: rayon::current_num_threads(),
    })
}

/// A method to benchmark; `graph` is an error for a checkpoint that failed to load.
#[derive(Debug)]
pub struct MethodSpec {
    pub name: String,
    pub graph: Result<NetworkGraph>,
    /// Frames per pass for frame-wise graphs.
    pub det_span: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: String,
    pub statistical: bool,
    pub fps: FpsMeasurement,
    pub dice: DiceReport,
    pub flop_ratio: f64,
    pub r: f64,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub failed: Vec<(String, String)>,
}

pub fn bench_method(spec: &MethodSpec, cases: &[(VideoVolume, MaskVolume)], ica: &IcaConfig, repeats: usize) -> Result<BenchRecord> {
    let graph = spec.graph.as_ref().map_err(|e| Error::Usage(e.to_string()))?;
    let videos: Vec<VideoVolume> = cases.iter().map(|c| c.0.clone()).collect();
    let fps = measure_fps(graph, &videos, ica, spec.det_span, repeats)?;
    let dice = evaluate(graph, &prepare(graph, cases, ica, spec.det_span)?)?;
    let stat = graph.config.statistical;
    let scales = &graph.config.scales;
    let (flop_ratio, r, t) = if stat {
        let dims = videos[0].dims();
        let ratio = flop_count(graph, dims).analytic_ratio;
        (ratio, scales.iter().map(|s| s.ratio()).sum::<f64>() / scales.len() as f64, scales[0].span)
    } else {
        (1.0, 1.0, spec.det_span)
    };
    Ok(BenchRecord { method: spec.name.clone(), statistical: stat, fps, dice, flop_ratio, r, t })
}

/// Benchmarks every method on the same cases; failures become report rows.
pub fn compare(methods: &[MethodSpec], cases: &[(VideoVolume, MaskVolume)], ica: &IcaConfig, repeats: usize) -> BenchReport {
    let mut report = BenchReport { records: Vec::new(), failed: Vec::new() };
    for m in methods {
        match bench_method(m, cases, ica, repeats) {
            Ok(r) => report.records.push(r),
            Err(e) => report.failed.push((m.name.clone(), format!("{}: {e}", e.category()))),
        }
    }
    report
}

/// `(fps_stat / fps_det - 1) * 100`.
pub fn speedup_percent(fps_stat: f64, fps_det: f64) -> f64 {
    (fps_stat / fps_det - 1.0) * 100.0
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.3},{:.3},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{},{}",
                r.method,
                r.fps.fps,
                r.fps.fps_ci,
                r.dice.mean[0],
                r.dice.mean[1],
                r.dice.mean[2],
                r.dice.mean_dice,
                r.flop_ratio,
                r.r,
                r.t,
                r.fps.threads
            );
        }
        for (name, why) in &self.failed {
            let _ = writeln!(s, "{name},failed,,,,,,,,,{}", why.replace(',', ";"));
        }
        s
    }

    /// Aligned table with Dice as `mean±std`, speedups against the fastest
    /// frame-wise method, and the published reference figures.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>11} {:>11} {:>11} {:>11} {:>9} {:>8} {:>7} {:>3} {:>7}", "method", "RV", "MYO", "LV", "Average", "FPS", "flops", "r", "t", "threads");
        for r in &self.records {
            let row = r.dice.table_row();
            let _ = writeln!(
                s,
                "{:<24} {:>11} {:>11} {:>11} {:>11} {:>9.1} {:>8.2} {:>7.4} {:>3} {:>7}",
                r.method, row[0], row[1], row[2], row[3], r.fps.fps, r.flop_ratio, r.r, r.t, r.fps.threads
            );
        }
        for (name, why) in &self.failed {
            let _ = writeln!(s, "{name:<24} failed: {why}");
        }
        if let Some(base) = self.records.iter().filter(|r| !r.statistical).max_by(|a, b| a.fps.fps.total_cmp(&b.fps.fps)) {
            for r in self.records.iter().filter(|r| r.statistical) {
                let _ = writeln!(
                    s,
                    "speedup {} vs {}: {:+.1}% (analytic layer ratio {:.2})",
                    r.method,
                    base.method,
                    speedup_percent(r.fps.fps, base.fps.fps),
                    r.flop_ratio
                );
            }
        }
        let _ = writeln!(s, "\npublished reference (not reproduced; different data and hardware):");
        let _ = writeln!(s, "  MSU-Net (T5)  Dice average .862±.011  43.2 FPS");
        s
    }
}
