//! Implementations of gen-data, train, infer, bench and params.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dr1mask_core::bench::{report_markdown, run_bench, to_csv, BenchCase};
use dr1mask_core::data::{
    encode_pgm, encode_ppm, generate, load_scene, save_dataset, scene_to_rgb, shape_name,
    DatasetSpec,
};
use dr1mask_core::heads::{count_params, mask_to_gray, panoptic_to_rgb, HeadKind};
use dr1mask_core::train::{
    evaluate, load_checkpoint, save_checkpoint, train_loop, Checkpoint, Model,
};

use crate::config::Config;

pub struct GenArgs {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
}

pub fn cmd_gen(cfg: &Config, args: &GenArgs, out: &Path) -> Result<()> {
    let spec = DatasetSpec {
        seed: cfg.seed,
        count: args.count,
        height: args.height,
        width: args.width,
        n_stuff_classes: cfg.stuff_classes,
        n_thing_classes: cfg.thing_classes,
        min_instances: args.min_instances,
        max_instances: args.max_instances,
    };
    let scenes = generate(&spec);
    save_dataset(out, &scenes)?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    let shortfall: u32 = scenes.iter().map(|s| s.shortfall).sum();
    println!(
        "wrote {} scenes ({}x{}, {} instances, shortfall {}) to {}",
        scenes.len(),
        args.height,
        args.width,
        instances,
        shortfall,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(
    cfg: &Config,
    data: &Path,
    resume: Option<&Path>,
    threads: usize,
    out: &Path,
) -> Result<()> {
    let scenes = dr1mask_core::data::load_dataset(data)?;
    let resume_ck: Option<Checkpoint<f32>> = match resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if threads > 1 {
        eprintln!(
            "warning: --threads {threads} parallelizes per-instance head work; \
             bitwise replay of single-threaded runs is not guaranteed"
        );
    }
    let tcfg = cfg.train_config(threads);
    let result = train_loop::<f32>(&scenes, &tcfg, resume_ck.as_ref())?;

    save_checkpoint(
        out,
        &result.model.params,
        Some(&result.optimizer),
        result.iteration,
        &cfg.echo(),
    )?;
    let metrics_path = metrics_path_for(out);
    fs::write(&metrics_path, &result.metrics_csv)
        .with_context(|| format!("writing {}", metrics_path.display()))?;

    if let Some(at) = result.diverged_at {
        bail!(
            "training diverged (non-finite loss) at iteration {at}; last checkpoint saved to {}",
            out.display()
        );
    }
    let last = result.metrics_csv.lines().last().unwrap_or("");
    println!(
        "trained {} iterations over {} scenes; checkpoint {}, metrics {}",
        result.iteration,
        scenes.len(),
        out.display(),
        metrics_path.display()
    );
    println!("last metrics row: {last}");
    Ok(())
}

pub fn metrics_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.csv")
}

pub fn cmd_infer(cli_cfg: &Config, checkpoint: &Path, scene_path: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    // the checkpoint's config echo is authoritative for model structure
    let cfg = if ck.config_echo.trim().is_empty() {
        cli_cfg.clone()
    } else {
        Config::parse(&ck.config_echo).context("parsing checkpoint config echo")?
    };
    let mut model: Model<f32> = Model::init(cfg.model_config());
    model.load_tensors(&ck.tensors)?;
    let scene = load_scene(scene_path)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let inference = model.infer(&scene)?;
    let (h, w) = (scene.height(), scene.width());

    // input image for reference
    fs::write(
        out.join("image.ppm"),
        encode_ppm(w, h, &scene_to_rgb(&scene)),
    )?;

    // color-coded panoptic (or semantic) map, already at image resolution
    if let Some(map) = &inference.panoptic {
        fs::write(
            out.join("panoptic.ppm"),
            encode_ppm(w, h, &panoptic_to_rgb(map)),
        )?;
    }

    // per-instance masks and line-oriented metadata
    let mut meta = String::new();
    for (i, pred) in inference.eval.preds.iter().enumerate() {
        let s = pred.logits.shape();
        let gray = mask_to_gray(&pred.logits);
        fs::write(
            out.join(format!("mask_{i:03}.pgm")),
            encode_pgm(s.w, s.h, &gray),
        )?;
        let inst = &scene.instances[pred.assignment.instance];
        meta.push_str(&format!(
            "id={} class={} name={} box={},{},{},{} score=0\n",
            i,
            inst.class_id,
            shape_name(inst.class_id),
            inst.bbox[0],
            inst.bbox[1],
            inst.bbox[2],
            inst.bbox[3]
        ));
    }
    fs::write(out.join("instances.txt"), meta)?;

    let report = evaluate(&model, std::slice::from_ref(&scene))?;
    println!(
        "inferred {} instances; mean mask IoU {:.3}, panoptic pixel accuracy {:.3}; outputs in {}",
        inference.eval.preds.len(),
        report.mean_mask_iou,
        report.panoptic_pixel_accuracy,
        out.display()
    );
    Ok(())
}

pub struct BenchArgs {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
}

pub fn cmd_bench(args: &BenchArgs, out: &Path) -> Result<()> {
    let mut grid = Vec::new();
    for &channels in &args.channels {
        for &kernel in &args.kernels {
            for &size in &args.sizes {
                grid.push(BenchCase {
                    channels,
                    kernel,
                    h: size,
                    w: size,
                    repetitions: args.reps,
                    warmup: args.warmup,
                });
            }
        }
    }
    let rows = run_bench(&grid)?;
    for r in &rows {
        if r.scaled {
            eprintln!(
                "note: C={} k={} {}x{} was below the timer floor; repetitions were inner-scaled",
                r.channels, r.kernel, r.h, r.w
            );
        }
    }
    fs::write(out, to_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report_markdown(&rows));
    println!("csv written to {}", out.display());
    Ok(())
}

pub fn cmd_params(cfg: &Config) -> Result<()> {
    let cb = cfg.effective_basis_width();
    println!("basis width C_b = {cb}, K_proj = 4, attention 4x14x14, rank 4");
    println!("configured head: {}", cfg.head_kind.name());
    println!();
    println!("head      per-instance attention  per-instance total  shared");
    for kind in [HeadKind::Vector, HeadKind::Full, HeadKind::Factored] {
        let c = count_params(kind, cb);
        println!(
            "{:<9} {:>22}  {:>18}  {:>6}",
            kind.name(),
            c.per_instance_attention,
            c.per_instance_total,
            c.shared
        );
    }
    println!();
    println!(
        "factored attention carries {} values per instance instead of {} (plus t of length {})",
        count_params(HeadKind::Factored, cb).per_instance_attention,
        count_params(HeadKind::Full, cb).per_instance_attention,
        cb * 4
    );
    Ok(())
}
