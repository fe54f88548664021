use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::VideoVolume;
use crate::ica::{Decomposition, IcaConfig};
use crate::sampler::{extract_multiscale, ScaleSpec};

fn random_video(dims: [usize; 4], seed: u64) -> VideoVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    VideoVolume::new(dims, voxels).unwrap()
}

fn two_scale_graph(mix_point: MixPoint) -> NetworkGraph {
    let scales = vec![ScaleSpec::new(2, 2, 4).unwrap(), ScaleSpec::new(4, 2, 3).unwrap()];
    let mut cfg = GraphConfig::msunet(scales, 3, 2, 4, mix_point);
    cfg.seed = 11;
    NetworkGraph::build(cfg).unwrap()
}

fn pca() -> IcaConfig {
    IcaConfig { method: Decomposition::Pca, ..IcaConfig::default() }
}

/// Independent count: conv `co ci k^2 + co` summed over the architecture.
fn expected_params(c0: usize, classes: usize, steps: &[usize]) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let mut total = 0;
    for &k in steps {
        let mut cin = 1;
        for l in 0..k {
            total += conv(cin, c0 << l, 3) + conv(c0 << l, c0 << (l + 1), 3);
            cin = c0 << (l + 1);
        }
        total += conv(cin, c0 << k, 3);
        for l in 0..k {
            total += conv(c0 << (l + 1), c0 << l, 2) + conv(2 * (c0 << l), c0 << l, 3);
        }
    }
    let fe = steps.len() * c0;
    total + conv(fe, c0, 3) + conv(c0, classes, 1)
}

#[test]
fn parameter_counts_match_architecture() {
    let unet = NetworkGraph::build(GraphConfig::unet(3, 8, 4)).unwrap();
    assert_eq!(unet.param_count(), expected_params(8, 4, &[2]));
    // hand count of the three-level, width-8 baseline
    assert_eq!(unet.param_count(), 26444);
    let ms = two_scale_graph(MixPoint::AfterDownTube);
    assert_eq!(ms.param_count(), expected_params(3, 4, &[2, 1]));
    let last = ms.layout.last().unwrap();
    assert_eq!(last.offset + last.len(), ms.param_count());
    assert!(ms.layout_table().starts_with("name,offset"));
}

#[test]
fn depth_follows_patch_ratio() {
    let g = two_scale_graph(MixPoint::AfterDownTube);
    assert_eq!(g.branches[0].down.len(), 2);
    assert_eq!(g.branches[1].down.len(), 1);
    for br in &g.branches {
        assert_eq!(br.up.len(), br.down.len());
        for (d, u) in br.down.iter().zip(&br.up) {
            assert_eq!(d.relu.out_channels, u.tconv.out_channels);
            assert_eq!(u.concat.in_channels, 2 * d.relu.out_channels);
        }
        assert!(br.down.iter().all(|d| d.conv.mode == Mode::Statistical));
        assert!(br.up.iter().all(|u| u.conv.mode == Mode::Deterministic));
    }
    let late = two_scale_graph(MixPoint::AfterUpTube);
    assert!(late.branches[0].up.iter().all(|u| u.conv.mode == Mode::Statistical));
    assert_eq!(late.final_eval.conv.mode, Mode::Deterministic);
}

#[test]
fn incompatible_configs_fail_to_build() {
    let scales = vec![ScaleSpec::new(4, 2, 3).unwrap(), ScaleSpec::new(6, 2, 3).unwrap()];
    let err = NetworkGraph::build(GraphConfig::msunet(scales, 4, 2, 4, MixPoint::AfterDownTube)).unwrap_err();
    assert_eq!(err.category(), crate::error::Category::Config);
    assert!(NetworkGraph::build(GraphConfig::unet(0, 8, 4)).is_err());
    let scales = vec![ScaleSpec::new(2, 2, 3).unwrap(), ScaleSpec::new(4, 2, 3).unwrap()];
    let mut cfg = GraphConfig::msunet(scales, 4, 2, 4, MixPoint::AfterDownTube);
    cfg.share_center = true;
    assert!(NetworkGraph::build(cfg).is_err());
}

#[test]
fn shared_center_reuses_parameters() {
    let scales = vec![ScaleSpec::new(4, 2, 3).unwrap(), ScaleSpec::new(4, 2, 5).unwrap()];
    let mut cfg = GraphConfig::msunet(scales, 2, 2, 4, MixPoint::AfterDownTube);
    cfg.share_center = true;
    let g = NetworkGraph::build(cfg).unwrap();
    assert_eq!(g.branches[0].center.conv.slot, g.branches[1].center.conv.slot);
}

fn linear_path_gap(mix_point: MixPoint) -> f64 {
    let graph = two_scale_graph(mix_point);
    let video = random_video([16, 14, 2, 4], 5);
    let scales: Vec<ScaleSpec> = graph.config.scales.clone();
    let ex = extract_multiscale(&video, &scales, &pca()).unwrap();
    let opts = ForwardOptions { force_open_gates: true, check_finite: true };
    let mut worst: f64 = 0.0;
    for grids in &ex.grids {
        for z in 0..2 {
            let stat = forward_slice(&graph, &stat_input(grids, z, 14, 16), opts, false).unwrap();
            let det_in = SliceInput {
                branches: grids.iter().map(|g| BranchInput::Det { tensor: mixed_grid_slice(g, z) }).collect(),
                height: 14,
                width: 16,
            };
            let det = forward_slice(&graph, &det_in, opts, false).unwrap();
            assert_eq!(stat.logits.data.len(), det.logits.data.len());
            let scale = det.logits.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in stat.logits.data.iter().zip(&det.logits.data) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn open_gates_make_mixing_commute_with_the_network() {
    assert!(linear_path_gap(MixPoint::AfterDownTube) < 1e-4);
    assert!(linear_path_gap(MixPoint::AfterUpTube) < 1e-4);
}

#[test]
fn stat_forward_is_deterministic_and_shaped() {
    let graph = two_scale_graph(MixPoint::AfterDownTube);
    let video = random_video([16, 14, 2, 3], 6);
    let ex = extract_multiscale(&video, &graph.config.scales, &pca()).unwrap();
    let a = forward_stat(&graph, &ex.grids, video.dims(), ForwardOptions::default()).unwrap();
    let b = forward_stat(&graph, &ex.grids, video.dims(), ForwardOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.data.len(), 16 * 14 * 2 * 3 * 4);
    assert!(a.data.iter().all(|v| v.is_finite()));
    let labels = a.argmax();
    assert!(labels.iter().all(|&l| l < 4));
}

#[test]
fn det_forward_ignores_span_for_the_baseline() {
    let graph = NetworkGraph::build(GraphConfig::unet(2, 4, 4)).unwrap();
    let video = random_video([12, 10, 2, 5], 7);
    let a = forward_det(&graph, &video, 1, ForwardOptions::default()).unwrap();
    let b = forward_det(&graph, &video, 5, ForwardOptions::default()).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn backward_without_tape_is_a_usage_error() {
    let graph = NetworkGraph::build(GraphConfig::unet(1, 2, 2)).unwrap();
    let video = random_video([4, 4, 1, 1], 1);
    let stack = frame_stack(&video, 0, 0..1, 1);
    let out = forward_slice(&graph, &det_input(&graph, &stack), ForwardOptions::default(), false).unwrap();
    let err = backward(&graph, &out, &out.logits).unwrap_err();
    assert_eq!(err.category(), crate::error::Category::Usage);
}

/// `L = sum(R * logits)` for a fixed random `R`.
fn gradcheck(graph: &mut NetworkGraph, input: &SliceInput, seed: u64) -> f64 {
    let out = forward_slice(graph, input, ForwardOptions::default(), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = out.logits.clone();
    r.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let loss = |l: &PlaneTensor| (l.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>(), r.clone());
    let report = gradient_check(graph, input, loss, 1e-3, 8, seed).unwrap();
    assert!(report.checked >= 2 * graph.layout.len(), "{report:?}");
    report.worst_relative_error
}

#[test]
fn gradients_match_finite_differences_in_both_modes() {
    let mut graph = two_scale_graph(MixPoint::AfterDownTube);
    let video = random_video([12, 12, 2, 2], 8);
    let scales = vec![ScaleSpec::new(2, 2, 2).unwrap(), ScaleSpec::new(4, 2, 1).unwrap()];
    graph.config.scales = scales.clone();
    let ex = extract_multiscale(&video, &scales, &pca()).unwrap();
    let input = stat_input(&ex.grids[0], 1, 12, 12);
    assert!(gradcheck(&mut graph, &input, 1) < 1e-4);

    let mut late = two_scale_graph(MixPoint::AfterUpTube);
    assert!(gradcheck(&mut late, &input, 2) < 1e-4);

    let mut unet = NetworkGraph::build(GraphConfig::unet(3, 2, 3)).unwrap();
    let stack = frame_stack(&video, 0, 0..2, 2);
    let input = det_input(&unet, &stack);
    assert!(gradcheck(&mut unet, &input, 3) < 1e-4);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let graph = two_scale_graph(MixPoint::AfterUpTube);
    let bytes = encode_checkpoint(&graph);
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, graph.config);
    for (a, b) in back.params.iter().zip(&graph.params) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(crate::Error::Format { offset: 0, .. })));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_checkpoint(cut), Err(crate::Error::Format { offset, .. }) if offset == cut.len() as u64));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(crate::Error::Format { offset, .. }) if offset == bytes.len() as u64));
}

#[test]
fn single_layer_flop_ratio() {
    let scale = ScaleSpec::new(7, 5, 25).unwrap();
    let graph = NetworkGraph::build(GraphConfig::msunet(vec![scale], 8, 2, 4, MixPoint::AfterDownTube)).unwrap();
    let report = flop_count(&graph, [56, 56, 10, 5]);
    let first = &report.layers[0];
    assert_eq!(first.name, "s0.down0.conv3x3");
    assert!((first.ratio() - 5.0 * 49.0 / 27.0).abs() < 1e-12);
    assert!(report.analytic_ratio > 1.0);
    assert_eq!(report.stat_macs, report.layers.iter().map(|l| l.stat_macs).sum::<u64>());
    let unet = NetworkGraph::build(GraphConfig::unet(3, 8, 4)).unwrap();
    let r = flop_count(&unet, [64, 64, 1, 1]);
    assert_eq!(r.stat_macs, r.det_macs);
}

#[test]
fn constant_graph_emits_its_bias() {
    let mut g = two_scale_graph(MixPoint::AfterDownTube);
    g.params.fill(0.0);
    let b = g.layout.last().unwrap().bias_range();
    g.params[b].copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
    let video = random_video([16, 14, 2, 2], 3);
    let ex = extract_multiscale(&video, &g.config.scales, &pca()).unwrap();
    let out = forward_slice(&g, &stat_input(&ex.grids[0], 0, 14, 16), ForwardOptions::default(), false).unwrap();
    for c in 0..4 {
        let want = [0.5, -1.0, 2.0, 0.25][c];
        assert!(out.logits.data[c * out.logits.channel_len()..(c + 1) * out.logits.channel_len()].iter().all(|&v| v == want));
    }
}

#[test]
fn one_pass_yields_every_frame_of_the_snippet() {
    let scales = vec![ScaleSpec::new(2, 5, 3).unwrap()];
    let g = NetworkGraph::build(GraphConfig::msunet(scales.clone(), 2, 2, 4, MixPoint::AfterDownTube)).unwrap();
    let video = random_video([8, 8, 2, 5], 4);
    let ex = extract_multiscale(&video, &scales, &pca()).unwrap();
    let out = forward_slice(&g, &stat_input(&ex.grids[0], 1, 8, 8), ForwardOptions::default(), false).unwrap();
    assert_eq!((out.logits.channels, out.logits.planes, out.logits.height, out.logits.width), (4, 5, 8, 8));
}

#[test]
fn unit_scale_statistics_match_the_frame_network() {
    let scales = vec![ScaleSpec::new(1, 1, 1).unwrap()];
    let g = NetworkGraph::build(GraphConfig::msunet(scales.clone(), 2, 3, 3, MixPoint::AfterDownTube)).unwrap();
    let video = random_video([10, 9, 2, 3], 12);
    let ex = extract_multiscale(&video, &scales, &pca()).unwrap();
    for force in [true, false] {
        let opts = ForwardOptions { force_open_gates: force, check_finite: true };
        let stat = forward_stat(&g, &ex.grids, video.dims(), opts).unwrap();
        let det = forward_det(&g, &video, 1, opts).unwrap();
        for (a, b) in stat.data.iter().zip(&det.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn single_pixel_chain_is_hand_checkable() {
    let mut g = NetworkGraph::build(GraphConfig::unet(1, 2, 1)).unwrap();
    g.params.fill(0.0);
    // center taps only see the single pixel: w1 * x + b1 -> relu -> w2 * . + b2 -> relu -> w3 * . + b3
    let set = |g: &mut NetworkGraph, name: &str, w: &[(usize, f64)], b: &[(usize, f64)]| {
        let s = g.layout.iter().find(|s| s.name == name).unwrap().clone();
        for &(i, v) in w {
            g.params[s.offset + i] = v;
        }
        for &(i, v) in b {
            g.params[s.bias_range().start + i] = v;
        }
    };
    set(&mut g, "s0.center.conv3x3", &[(4, 2.0)], &[(0, -0.5)]);
    set(&mut g, "final.conv3x3", &[(4, 3.0)], &[(0, 0.25)]);
    set(&mut g, "final.conv1x1", &[(0, -1.5)], &[(0, 0.1)]);
    let video = VideoVolume::new([1, 1, 1, 1], vec![0.75]).unwrap();
    let logits = forward_det(&g, &video, 1, ForwardOptions::default()).unwrap();
    let h1 = (2.0f64 * 0.75 - 0.5).max(0.0);
    let h2 = (3.0 * h1 + 0.25).max(0.0);
    assert_eq!(logits.data, vec![-1.5 * h2 + 0.1]);
}

#[test]
fn zero_and_gated_gradients() {
    let mut g = two_scale_graph(MixPoint::AfterDownTube);
    let video = random_video([16, 14, 2, 2], 9);
    let ex = extract_multiscale(&video, &g.config.scales, &pca()).unwrap();
    let input = stat_input(&ex.grids[0], 0, 14, 16);
    let out = forward_slice(&g, &input, ForwardOptions::default(), true).unwrap();
    let zero = PlaneTensor::zeros_like(&out.logits);
    assert!(backward(&g, &out, &zero).unwrap().iter().all(|&v| v == 0.0));

    // channel 0 of the first layer is switched off everywhere
    let first = g.layout[0].clone();
    g.params[first.bias_range().start] = -1e6;
    let out = forward_slice(&g, &input, ForwardOptions::default(), true).unwrap();
    let mut ones = out.logits.clone();
    ones.data.fill(1.0);
    let grad = backward(&g, &out, &ones).unwrap();
    let per_filter = first.weights / first.shape[0];
    assert!(grad[first.offset..first.offset + per_filter].iter().all(|&v| v == 0.0));
    assert_eq!(grad[first.bias_range().start], 0.0);
    assert!(grad[first.offset + per_filter..first.offset + 2 * per_filter].iter().any(|&v| v != 0.0));
}

#[test]
fn audit_covers_layer_kinds_under_tolerance() {
    let entries = audit(1e-3, 6, 21).unwrap();
    assert_eq!(entries.len(), 3);
    for e in &entries {
        assert!(e.params <= 2000, "{} has {} params", e.name, e.params);
        assert!(e.report.worst_relative_error < 1e-4, "{}: {:?}", e.name, e.report);
        assert!(e.report.checked > e.report.per_slot.len());
    }
}
