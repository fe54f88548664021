//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails. `ACCEPTANCE_ONLY=1,4` runs a subset.

use std::io::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use msunet::archive::{encode_archive, CanonicalArchive};
use msunet::bench::{measure_fps, measure_fps_framewise};
use msunet::dataio::{encode_volume, generate_phantom, split_cases, MaskVolume, PhantomConfig, VideoVolume, CLASS_NAMES};
use msunet::ica::{amari_distance, ica_fit, IcaConfig};
use msunet::sampler::{extract_multiscale, normalize, normalized_rmse, restore, ScaleSpec};
use msunet::statnet::{
    audit, flop_count, forward_slice, mixed_grid_slice, stat_input, BranchInput, ForwardOptions, GraphConfig, MixPoint,
    NetworkGraph, SliceInput,
};
use msunet::trainer::{evaluate, prepare, train, DiceReport, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Case = (VideoVolume, MaskVolume);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn phantom(dims: [usize; 4], cases: usize, seed: u64, taper: f64) -> Vec<Case> {
    generate_phantom(&PhantomConfig { dims, num_cases: cases, seed, apex_taper: taper, ..PhantomConfig::default() }).unwrap()
}

fn random_video(dims: [usize; 4], seed: u64) -> VideoVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    VideoVolume::new(dims, voxels).unwrap()
}

fn msunet_graph(patches: &[usize], span: usize, ratio: f64, base: usize, depth: usize, mix: MixPoint) -> NetworkGraph {
    let scales = patches.iter().map(|&n| ScaleSpec::from_ratio(n, span, ratio).unwrap()).collect();
    NetworkGraph::build(GraphConfig::msunet(scales, base, depth, 4, mix)).unwrap()
}

fn restore_error(video: &VideoVolume, spec: ScaleSpec) -> f64 {
    let (norm_video, norm) = normalize(video);
    let ex = extract_multiscale(&norm_video, &[spec], &IcaConfig::default()).unwrap();
    let grids: Vec<_> = ex.grids.iter().map(|g| g[0].clone()).collect();
    let restored = restore(&grids, &ex.plan, 0, &norm, None).unwrap();
    normalized_rmse(&restored, video).unwrap()
}

fn restore_error_falls() -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let video = phantom([64, 64, 8, 30], 1, 7, 0.93).remove(0).0;
    let dims = [6, 12, 25, 49];
    let errs: Vec<f64> = dims.iter().map(|&d| restore_error(&video, ScaleSpec::new(7, 5, d).unwrap())).collect();
    let secs = start.elapsed().as_secs_f64();
    let coarse = ScaleSpec::from_ratio(7, 5, 1.0 / 40.0).unwrap();
    let fine = ScaleSpec::from_ratio(7, 5, 0.1).unwrap();
    let ordered = errs.windows(2).all(|w| w[1] <= w[0]);
    let at = |d: usize| errs[dims.iter().position(|&x| x == d).unwrap()];
    let pass = ordered && at(fine.dim) < at(coarse.dim) && secs < 120.0;
    let listed: Vec<String> = dims.iter().zip(&errs).map(|(d, e)| format!("d={d}:{e:.4}")).collect();
    vec![("1 restore error falls with basis dimension".into(), outcome(pass, format!("{} in {secs:.1}s", listed.join(" "))))]
}

fn open_gate_gap(graph: &NetworkGraph, video: &VideoVolume) -> f64 {
    let [x, y, z, _] = video.dims();
    let ex = extract_multiscale(video, &graph.config.scales, &IcaConfig::default()).unwrap();
    let opts = ForwardOptions { force_open_gates: true, check_finite: true };
    let mut worst: f64 = 0.0;
    for grids in &ex.grids {
        for zi in 0..z {
            let stat = forward_slice(graph, &stat_input(grids, zi, y, x), opts, false).unwrap();
            let det_in = SliceInput {
                branches: grids.iter().map(|g| BranchInput::Det { tensor: mixed_grid_slice(g, zi) }).collect(),
                height: y,
                width: x,
            };
            let det = forward_slice(graph, &det_in, opts, false).unwrap();
            for (a, b) in stat.logits.data.iter().zip(&det.logits.data) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

fn mixing_commutes() -> Vec<(String, Outcome)> {
    let video = random_video([64, 64, 1, 4], 21);
    let mut worst: f64 = 0.0;
    let mut graphs = 0;
    for depth in 1..=6 {
        for mix in [MixPoint::AfterDownTube, MixPoint::AfterUpTube] {
            let scales = vec![ScaleSpec::new(2, 2, 3).unwrap(), ScaleSpec::new(4, 2, 5).unwrap()];
            let mut cfg = GraphConfig::msunet(scales, 2, depth, 4, mix);
            cfg.seed = depth as u64;
            let graph = NetworkGraph::build(cfg).unwrap();
            worst = worst.max(open_gate_gap(&graph, &video));
            graphs += 1;
        }
    }
    vec![("2 open gates commute with mixing".into(), outcome(worst < 1e-4, format!("max |diff| {worst:.2e} over {graphs} graphs")))]
}

fn gradients_match() -> Vec<(String, Outcome)> {
    let entries = audit(1e-3, 6, 0).unwrap();
    let worst = entries.iter().map(|e| e.report.worst_relative_error).fold(0.0, f64::max);
    let largest = entries.iter().map(|e| e.params).max().unwrap_or(0);
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    let pass = worst < 1e-4 && largest <= 2000 && !entries.is_empty();
    vec![(
        "3 finite-difference gradient audit".into(),
        outcome(pass, format!("worst {worst:.2e}, largest graph {largest} params ({})", names.join(", "))),
    )]
}

/// `rows x len` mixtures of three uniform sources and the mixing matrix.
fn known_mixing(rows: usize, len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<f64> = (0..3 * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mixing: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = vec![0.0; rows * len];
    for r in 0..rows {
        for c in 0..len {
            x[r * len + c] = (0..3).map(|i| mixing[r * 3 + i] * sources[i * len + c]).sum();
        }
    }
    (x, mixing)
}

fn columns_as_rows(m: &[f64], rows: usize) -> Vec<f64> {
    (0..3).flat_map(|i| (0..rows).map(move |r| m[r * 3 + i])).collect()
}

/// Largest gap between stored and recomputed residual RMS over random inputs.
fn arbitrary_round_trip_gap(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cols = rng.random_range(3..40);
        let rows = rng.random_range(30..200);
        let dim = rng.random_range(1..=cols.min(rows / 10));
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fit = ica_fit(&x, rows, cols, dim, &IcaConfig { seed, ..IcaConfig::default() }).unwrap();
        if !(0.0..=1.0).contains(&fit.explained_fraction) {
            return f64::INFINITY;
        }
        for p in 0..rows {
            let rec = fit.reconstruct_row(p);
            let rms = (rec.iter().zip(&x[p * cols..(p + 1) * cols]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / cols as f64).sqrt();
            worst = worst.max((rms - fit.residual_sigma[p]).abs());
        }
    }
    worst
}

fn ica_recovers_mixing() -> Vec<(String, Outcome)> {
    let (rows, len) = (500, 4000);
    let mut worst_amari: f64 = 0.0;
    let mut worst_rms: f64 = 0.0;
    for seed in 0..3 {
        let (x, mixing) = known_mixing(rows, len, seed);
        let fit = ica_fit(&x, rows, len, 3, &IcaConfig::default()).unwrap();
        let d = amari_distance(&columns_as_rows(&fit.coefficients, rows), &columns_as_rows(&mixing, rows), 3, rows).unwrap();
        worst_amari = worst_amari.max(d);
        for p in 0..rows {
            let rec = fit.reconstruct_row(p);
            let rms = (rec.iter().zip(&x[p * len..(p + 1) * len]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len as f64).sqrt();
            worst_rms = worst_rms.max(rms);
        }
    }
    let identity = arbitrary_round_trip_gap(24);
    let pass = worst_amari < 0.05 && worst_rms < 1e-6 && identity < 1e-6;
    vec![(
        "4 ICA recovers a known mixing".into(),
        outcome(
            pass,
            format!("P={rows} L={len}: worst Amari {worst_amari:.4}, worst RMS {worst_rms:.2e}; residual identity gap {identity:.2e} on 24 random inputs"),
        ),
    )]
}

fn throughput() -> Vec<(String, Outcome)> {
    let video = phantom([80, 80, 8, 30], 1, 7, 0.93).remove(0).0;
    let videos = [video];
    let ica = IcaConfig::default();
    let t5 = msunet_graph(&[4, 8], 5, 0.1, 8, 2, MixPoint::AfterDownTube);
    let t10 = t5.with_scales([4, 8].iter().map(|&n| ScaleSpec::from_ratio(n, 10, 0.1).unwrap()).collect()).unwrap();
    let f5 = measure_fps(&t5, &videos, &ica, 5, 5).unwrap();
    let f10 = measure_fps(&t10, &videos, &ica, 5, 5).unwrap();
    let framewise = measure_fps_framewise(&t5, &videos, 5, 5).unwrap();
    let analytic = flop_count(&t5, videos[0].dims()).analytic_ratio;
    let measured = f5.fps / framewise.fps;
    let a = outcome(
        f10.fps > f5.fps,
        format!(
            "T10 {:.1} fps (extract {:.2}s) vs T5 {:.1} fps (extract {:.2}s), threads {}",
            f10.fps,
            f10.stages.extract.as_secs_f64(),
            f5.fps,
            f5.stages.extract.as_secs_f64(),
            f5.threads
        ),
    );
    let direct = measured >= 1.5;
    let escape = analytic < 1.5 && (0.5..=2.0).contains(&(measured / analytic));
    let b = outcome(
        direct || escape,
        format!(
            "stat {:.1} fps / framewise {:.1} fps = {measured:.2}, analytic {analytic:.3}{}",
            f5.fps,
            framewise.fps,
            if direct { "" } else { ", within 2x of analytic" }
        ),
    );
    vec![("5a longer snippets run faster".into(), a), ("5b statistical over framewise speedup".into(), b)]
}

fn flop_ratio() -> Vec<(String, Outcome)> {
    let scale = ScaleSpec::from_ratio(7, 5, 0.1).unwrap();
    let graph = NetworkGraph::build(GraphConfig::msunet(vec![scale], 8, 2, 4, MixPoint::AfterDownTube)).unwrap();
    let report = flop_count(&graph, [56, 56, 10, 5]);
    let first = &report.layers[0];
    let expected = 245.0 / 27.0;
    let rel = (first.ratio() - expected).abs() / expected;
    vec![(
        "6 single-layer analytic FLOP ratio".into(),
        outcome(rel < 0.05, format!("{} ratio {:.4} vs {expected:.4} (d={})", first.name, first.ratio(), scale.dim)),
    )]
}

fn fit_and_score(name: &str, graph: NetworkGraph, tr: &[Case], va: &[Case], te: &[Case], epochs: usize) -> (DiceReport, f64) {
    let start = Instant::now();
    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let ica = IcaConfig::default();
    let ptr = prepare(&graph, tr, &ica, tc.frames_per_unit).unwrap();
    let pva = prepare(&graph, va, &ica, tc.frames_per_unit).unwrap();
    let outcome = train(graph, &ptr, &pva, &tc, None).unwrap();
    let pte = prepare(&outcome.best, te, &ica, tc.frames_per_unit).unwrap();
    let report = evaluate(&outcome.best, &pte).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let row = report.table_row();
    println!("    {name:<14} {:>11} {:>11} {:>11} {:>11}   {secs:.0}s", row[0], row[1], row[2], row[3]);
    (report, secs)
}

fn segmentation_quality() -> Vec<(String, Outcome)> {
    let epochs = 2;
    let cases = phantom([64, 64, 8, 30], 30, 7, 0.93);
    let (tr, va, te) = split_cases(&cases, 20, 5);
    println!("    {:<14} {:>11} {:>11} {:>11} {:>11}", "method", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2], "Average");
    let unet = NetworkGraph::build(GraphConfig::unet(3, 8, 4)).unwrap();
    let (u, us) = fit_and_score("U-Net", unet, &tr, &va, &te, epochs);
    let ms = msunet_graph(&[4, 8], 5, 0.1, 8, 2, MixPoint::AfterDownTube);
    let (m, ms_secs) = fit_and_score("MSU-Net (T5)", ms, &tr, &va, &te, epochs);
    let secs = us + ms_secs;
    let pass = u.mean_dice >= 0.85 && m.mean_dice >= 0.85 && secs < 1800.0;
    vec![(
        "7 trained networks segment the phantom".into(),
        outcome(pass, format!("{epochs} epochs: U-Net {:.3}, MSU-Net {:.3} mean Dice in {secs:.0}s", u.mean_dice, m.mean_dice)),
    )]
}

fn train_bytes(graph: &NetworkGraph, cases: &[Case]) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va, _) = split_cases(cases, 2, 1);
    let tc = TrainConfig { epochs: 2, batch_snippets: 2, seed: 3, ..TrainConfig::default() };
    let ica = IcaConfig::default();
    let ptr = prepare(graph, &tr, &ica, tc.frames_per_unit).unwrap();
    let pva = prepare(graph, &va, &ica, tc.frames_per_unit).unwrap();
    train(graph.clone(), &ptr, &pva, &tc, Some(dir.path())).unwrap();
    (std::fs::read(dir.path().join("best.msun")).unwrap(), std::fs::read(dir.path().join("metrics.csv")).unwrap())
}

fn collapse_bytes(video: &VideoVolume, scales: &[ScaleSpec]) -> (Vec<u8>, Vec<u8>) {
    let (norm_video, norm) = normalize(video);
    let ex = extract_multiscale(&norm_video, scales, &IcaConfig { seed: 5, ..IcaConfig::default() }).unwrap();
    let archive = CanonicalArchive { plan: ex.plan, norm, grids: ex.grids };
    let restored = restore(&archive.scale_grids(1), &archive.plan, 1, &archive.norm, Some(9)).unwrap();
    (encode_archive(&archive).unwrap(), encode_volume(&restored).unwrap())
}

fn determinism() -> Vec<(String, Outcome)> {
    let cases = phantom([32, 32, 2, 10], 4, 11, 1.0);
    let graphs = [
        NetworkGraph::build(GraphConfig::unet(2, 4, 4)).unwrap(),
        msunet_graph(&[2, 4], 5, 0.1, 4, 2, MixPoint::AfterDownTube),
    ];
    let mut same = true;
    for g in &graphs {
        same &= train_bytes(g, &cases) == train_bytes(g, &cases);
    }
    let scales = [ScaleSpec::from_ratio(2, 5, 0.1).unwrap(), ScaleSpec::from_ratio(4, 5, 0.1).unwrap()];
    let restored_same = collapse_bytes(&cases[0].0, &scales) == collapse_bytes(&cases[0].0, &scales);
    vec![(
        "8 runs are bit-identical".into(),
        outcome(same && restored_same, format!("checkpoints and metrics identical: {same}; archives and restored volumes identical: {restored_same}")),
    )]
}

fn main() -> ExitCode {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [(usize, fn() -> Vec<(String, Outcome)>); 8] = [
        (1, restore_error_falls),
        (2, mixing_commutes),
        (3, gradients_match),
        (4, ica_recovers_mixing),
        (5, throughput),
        (6, flop_ratio),
        (7, segmentation_quality),
        (8, determinism),
    ];
    let mut lines = Vec::new();
    for (n, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let results = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            vec![(format!("{n} did not complete"), outcome(false, format!("panicked: {msg}")))]
        });
        for (name, o) in results {
            let line = format!("{} {name}: {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());
            println!("{line}");
            let _ = std::io::stdout().flush();
            lines.push((o.pass, line));
        }
    }
    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!("\nacceptance summary: {} passed, {failed} failed", lines.len() - failed);
    for (_, l) in &lines {
        println!("  {l}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
