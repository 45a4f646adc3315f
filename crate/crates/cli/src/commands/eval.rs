use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use ndarray::Array2;
use tilemark_core::data::{read_gray, read_mask, read_prob_raw};
use tilemark_core::metrics::{
    binarize, derive_grade_thresholds, downscale_to_grid, grade_patches, patch_confusion,
    threshold_sweep, GradeThresholds, PatchGrid, GRADES,
};
use tilemark_core::report::{write_grid_image, write_patch_report, write_pixel_report};

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predictions (<id>.dpred preferred, <id>.png fallback)
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth mask PNGs
    #[arg(long)]
    pub gt: PathBuf,
    /// Pixel-level CSV report path; the patch report lands next to it
    /// with a `_patches` suffix
    #[arg(long)]
    pub report: PathBuf,
    /// Fixed grade thresholds `t1,t2`; derived from the ground truth when
    /// omitted
    #[arg(long)]
    pub grade_thresholds: Option<String>,
    /// Probability threshold binarizing predictions for patch grading
    #[arg(long, default_value_t = 0.5)]
    pub pixel_threshold: f64,
    /// Also export 3x3 grade grids as tiny grayscale PNGs into this
    /// directory
    #[arg(long)]
    pub export_grids: Option<PathBuf>,
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                .flatten()
        })
        .collect();
    ids.sort();
    Ok(ids)
}

fn load_prediction(dir: &Path, id: &str) -> Result<Array2<f32>> {
    let raw = dir.join(format!("{id}.dpred"));
    if raw.is_file() {
        return Ok(read_prob_raw(&raw)?);
    }
    let png = dir.join(format!("{id}.png"));
    if png.is_file() {
        return Ok(read_gray(&png)?.mapv(|v| v as f32 / 255.0));
    }
    Err(anyhow!("no prediction for id {id}"))
}

pub fn run(args: EvalArgs) -> Result<()> {
    let gt_ids = png_ids(&args.gt)?;
    if gt_ids.is_empty() {
        bail!("no ground-truth masks under {}", args.gt.display());
    }
    let mut missing = Vec::new();
    let mut gts = Vec::new();
    let mut probs = Vec::new();
    for id in &gt_ids {
        match load_prediction(&args.pred, id) {
            Ok(p) => {
                let gt = read_mask(&args.gt.join(format!("{id}.png")))?;
                if p.dim() != gt.dim() {
                    bail!(
                        "id {id}: prediction {:?} vs ground truth {:?}",
                        p.dim(),
                        gt.dim()
                    );
                }
                probs.push(p);
                gts.push(gt);
            }
            Err(_) => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        bail!("unmatched ids (no prediction): {}", missing.join(", "));
    }

    // pixel level
    let sweep = threshold_sweep(&probs, &gts)?;
    write_pixel_report(&args.report, &sweep)?;
    println!(
        "pixel level over {} images: mean dice {:.4}, mean IoU {:.4}",
        gts.len(),
        sweep.overall_dice,
        sweep.overall_iou
    );

    // patch level
    let grade_th = match &args.grade_thresholds {
        Some(text) => {
            let parts: Vec<&str> = text.split(',').collect();
            if parts.len() != 2 {
                bail!("--grade-thresholds expects `t1,t2`");
            }
            let t1: f64 = parts[0].trim().parse().map_err(|_| anyhow!("bad t1"))?;
            let t2: f64 = parts[1].trim().parse().map_err(|_| anyhow!("bad t2"))?;
            GradeThresholds::new(t1, t2)?
        }
        None => {
            let th = derive_grade_thresholds(&gts)?;
            println!("derived grade thresholds: t1 = {:.6}, t2 = {:.6}", th.t1, th.t2);
            th
        }
    };

    let mut pred_grids: Vec<PatchGrid> = Vec::with_capacity(gts.len());
    let mut gt_grids: Vec<PatchGrid> = Vec::with_capacity(gts.len());
    for (prob, gt) in probs.iter().zip(&gts) {
        let pred_mask = binarize(prob, args.pixel_threshold)?;
        let pg = grade_patches(&downscale_to_grid(&pred_mask)?.fractions(), &grade_th)?;
        let gg = grade_patches(&downscale_to_grid(gt)?.fractions(), &grade_th)?;
        pred_grids.push(pg);
        gt_grids.push(gg);
    }
    let cm = patch_confusion(&pred_grids, &gt_grids)?;

    let patch_path = patch_report_path(&args.report);
    write_patch_report(&patch_path, &cm)?;

    if let Some(grid_dir) = &args.export_grids {
        std::fs::create_dir_all(grid_dir)?;
        for ((id, pg), gg) in gt_ids.iter().zip(&pred_grids).zip(&gt_grids) {
            write_grid_image(&grid_dir.join(format!("{id}_pred.png")), pg)?;
            write_grid_image(&grid_dir.join(format!("{id}_gt.png")), gg)?;
        }
    }

    println!("patch level: {} cells", cm.total());
    for (i, grade) in GRADES.iter().enumerate() {
        let fmt = |v: Option<f64>| {
            v.map(|x| format!("{x:.3}"))
                .unwrap_or_else(|| "-".to_string())
        };
        println!(
            "  {:<6} precision {}  recall {}",
            grade.name(),
            fmt(cm.precision(i)),
            fmt(cm.recall(i))
        );
    }
    println!(
        "reports: {} and {}",
        args.report.display(),
        patch_path.display()
    );
    Ok(())
}

fn patch_report_path(report: &Path) -> PathBuf {
    let stem = report
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    let ext = report.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    report.with_file_name(format!("{stem}_patches.{ext}"))
}
