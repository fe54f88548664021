use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msunet::archive::{read_archive, write_archive, CanonicalArchive};
use msunet::bench::{compare, MethodSpec};
use msunet::dataio::{
    generate_phantom, read_mask, read_volume, split_cases, write_mask, write_volume, MaskVolume, PhantomConfig, VideoVolume, CLASS_NAMES,
};
use msunet::error::{Error, Result};
use msunet::pipeline::predict;
use msunet::sampler::{extract_multiscale, normalize, normalized_rmse, restore as restore_scale};
use msunet::statnet::{audit, load_checkpoint, NetworkGraph};
use msunet::trainer::{class_dice, evaluate, prepare, train as fit, DiceReport};

use crate::config::RunConfig;

type Case = (VideoVolume, MaskVolume);

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pc = PhantomConfig {
        dims: cfg.phantom_dims()?,
        num_cases: cfg.usize("phantom_cases")?,
        seed: cfg.u64("seed")?,
        noise_sigma: cfg.f64("phantom_noise")?,
        apex_taper: cfg.f64("phantom_taper")?,
        ..PhantomConfig::default()
    };
    let cases = generate_phantom(&pc)?;
    for (i, (v, m)) in cases.iter().enumerate() {
        write_volume(out.join(format!("case{i:03}.msuv")), v)?;
        write_mask(out.join(format!("case{i:03}.msum")), m)?;
    }
    let [x, y, z, t] = pc.dims;
    println!("wrote {} cases of {x}x{y}x{z}x{t} to {}", cases.len(), out.display());
    Ok(())
}

/// Cases `caseNNN.msuv` + `caseNNN.msum` of `dir` in name order.
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let mut videos: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "msuv") && stem(p).starts_with("case"))
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(Error::Data(format!("no caseNNN.msuv files in {}", dir.display())));
    }
    videos.iter().map(|v| Ok((read_volume(v)?, read_mask(v.with_extension("msum"))?))).collect()
}

fn splits(cfg: &RunConfig) -> Result<(Vec<Case>, Vec<Case>, Vec<Case>)> {
    let cases = load_cases(&cfg.path("data_dir")?)?;
    Ok(split_cases(&cases, cfg.usize("train_cases")?, cfg.usize("val_cases")?))
}

pub fn extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let input = cfg.path("input")?;
    let video = read_volume(&input)?;
    let (norm_video, norm) = normalize(&video);
    let scales = cfg.scales()?;
    let ex = extract_multiscale(&norm_video, &scales, &cfg.ica()?)?;
    let archive = CanonicalArchive { plan: ex.plan, norm, grids: ex.grids };
    let path = out.join(format!("{}.msua", stem(&input)));
    write_archive(&path, &archive)?;
    let raw = video.voxels().len();
    let mut csv = String::from("scale,patch,span,dim,r,stored_floats,stored_fraction,explained_mean,unconverged\n");
    for (k, s) in scales.iter().enumerate() {
        let stored = archive.plan.stored_floats(k) * archive.plan.snippets;
        let fits: Vec<_> = ex.fits.iter().map(|f| f[k]).collect();
        let explained = fits.iter().map(|f| f.explained_fraction).sum::<f64>() / fits.len() as f64;
        let unconverged = fits.iter().filter(|f| !f.converged).count();
        let _ = writeln!(
            csv,
            "{k},{},{},{},{:.4},{stored},{:.4},{explained:.4},{unconverged}",
            s.patch,
            s.span,
            s.dim,
            s.ratio(),
            stored as f64 / raw as f64
        );
    }
    std::fs::write(out.join("compression.csv"), &csv)?;
    print!("{csv}");
    println!("archive {} ({} snippets)", path.display(), archive.plan.snippets);
    Ok(())
}

pub fn restore(cfg: &RunConfig, out: &Path) -> Result<()> {
    let archive = read_archive(cfg.path("archive")?)?;
    let k = cfg.usize("restore_scale")?;
    let spec = archive.plan.scales.get(k).ok_or_else(|| Error::config(format!("archive has no scale {k}")))?;
    let noise = if cfg.bool("restore_noise")? { Some(cfg.u64("seed")?) } else { None };
    let video = restore_scale(&archive.scale_grids(k), &archive.plan, k, &archive.norm, noise)?;
    write_volume(out.join("restored.msuv"), &video)?;
    let mut line = format!("scale={} d={} r={:.4}", spec.label(), spec.dim, spec.ratio());
    if let Some(src) = cfg.optional_path("input") {
        let e = normalized_rmse(&video, &read_volume(src)?)?;
        line.push_str(&format!(" normalized_rmse={e:.6}"));
    }
    println!("{line}");
    Ok(())
}

fn dice_table(report: &DiceReport) -> String {
    let row = report.table_row();
    format!("{:>11} {:>11} {:>11} {:>11}\n{:>11} {:>11} {:>11} {:>11}\n", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2], "Average", row[0], row[1], row[2], row[3])
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (tr, va, te) = splits(cfg)?;
    let graph = NetworkGraph::build(cfg.graph()?)?;
    let tc = cfg.train()?;
    let ica = cfg.ica()?;
    let ptr = prepare(&graph, &tr, &ica, tc.frames_per_unit)?;
    // without a validation split the best epoch is chosen on the training cases
    let pva = if va.is_empty() { ptr.clone() } else { prepare(&graph, &va, &ica, tc.frames_per_unit)? };
    println!("training {} parameters on {} cases, validating on {}", graph.param_count(), tr.len(), va.len());
    let outcome = fit(graph, &ptr, &pva, &tc, Some(out))?;
    println!("best epoch {} of {}", outcome.best_epoch, tc.epochs);
    if !te.is_empty() {
        let report = evaluate(&outcome.best, &prepare(&outcome.best, &te, &ica, tc.frames_per_unit)?)?;
        let table = dice_table(&report);
        std::fs::write(out.join("test_dice.txt"), &table)?;
        print!("test Dice over {} cases\n{table}", te.len());
    }
    Ok(())
}

pub fn infer(cfg: &RunConfig, out: &Path) -> Result<()> {
    let graph = load_checkpoint(&cfg.path("checkpoint")?)?;
    let input = cfg.path("input")?;
    let video = read_volume(&input)?;
    let p = predict(&graph, &video, &cfg.ica()?, cfg.usize("unet_frames")?)?;
    let mask = MaskVolume::new(video.dims(), p.labels)?;
    let path = out.join(format!("{}.mask.msum", stem(&input)));
    write_mask(&path, &mask)?;
    println!("mask {} in {:.3}s", path.display(), p.times.total.as_secs_f64());
    if let Some(truth) = cfg.optional_path("truth") {
        let truth = read_mask(truth)?;
        if truth.dims() != mask.dims() {
            return Err(Error::dim("truth mask differs in shape from the video"));
        }
        let d = class_dice(mask.labels(), truth.labels());
        let same = mask.labels() == truth.labels();
        println!("dice {}={:.4} {}={:.4} {}={:.4} identical={same}", CLASS_NAMES[0], d[0], CLASS_NAMES[1], d[1], CLASS_NAMES[2], d[2]);
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (_, _, test) = splits(cfg)?;
    if test.is_empty() {
        return Err(Error::config("bench needs test cases beyond train_cases + val_cases"));
    }
    let spec = cfg.raw("bench_methods");
    if spec.is_empty() {
        return Err(Error::config("`bench_methods` is required for this command"));
    }
    let det_span = cfg.usize("unet_frames")?;
    let methods: Vec<MethodSpec> = spec
        .split(',')
        .map(|m| {
            let (name, path) = m.split_once('=').ok_or_else(|| Error::config(format!("bench method `{m}` must be name=checkpoint")))?;
            Ok(MethodSpec { name: name.trim().to_string(), graph: load_checkpoint(Path::new(path.trim())), det_span })
        })
        .collect::<Result<_>>()?;
    let report = compare(&methods, &test, &cfg.ica()?, cfg.usize("bench_repeats")?);
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    let text = report.to_text();
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let tol = cfg.f64("gradcheck_tol")?;
    let entries = audit(cfg.f64("gradcheck_h")?, cfg.usize("gradcheck_probes")?, cfg.u64("seed")?)?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        for (slot, err) in &e.report.per_slot {
            println!("{:<16} {slot:<28} {err:.3e} {}", e.name, if *err < tol { "ok" } else { "FAIL" });
        }
        println!(
            "{:<16} params={} checked={} skipped={} worst={:.3e}",
            e.name, e.params, e.report.checked, e.report.skipped, e.report.worst_relative_error
        );
        worst = worst.max(e.report.worst_relative_error);
    }
    if worst < tol {
        println!("gradcheck PASS (worst {worst:.3e} < {tol:e})");
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradcheck failed: worst relative error {worst:.3e} >= {tol:e}")))
    }
}
