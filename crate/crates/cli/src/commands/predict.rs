use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use ndarray::{Array2, Array4, Axis};
use tilemark_core::checkpoint::{load_checkpoint, Checkpoint};
use tilemark_core::data::{prob_to_gray, read_rgb, write_gray, write_prob_raw};
use tilemark_core::model::ModelSpec;
use tilemark_core::nn::Mode;

use super::worker_count;

#[derive(Args)]
pub struct PredictArgs {
    /// Checkpoint file
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of input PNG images
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory for <id>.png and <id>.dpred maps
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the raw f32 sidecar files
    #[arg(long)]
    pub png_only: bool,
}

fn compatible(spec: &ModelSpec, h: usize, w: usize) -> bool {
    match spec {
        ModelSpec::Basic { .. } | ModelSpec::Improved(_) => h % 16 == 0 && w % 16 == 0,
        ModelSpec::Trans(cfg) => h == cfg.image_size && w == cfg.image_size,
    }
}

pub fn run(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;

    let mut ids: Vec<String> = std::fs::read_dir(&args.images)
        .with_context(|| format!("reading {}", args.images.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                .flatten()
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no .png images under {}", args.images.display());
    }

    // load everything up front so incompatible sizes fail before any output
    let mut images = Vec::with_capacity(ids.len());
    let mut offenders = Vec::new();
    for id in &ids {
        let img = read_rgb(&args.images.join(format!("{id}.png")))?;
        let (h, w, _) = img.dim();
        if !compatible(&ckpt.model, h, w) {
            offenders.push(format!("{id} ({h}x{w})"));
        }
        images.push(img);
    }
    if !offenders.is_empty() {
        bail!(
            "images incompatible with the {} checkpoint: {}",
            ckpt.model.kind_name(),
            offenders.join(", ")
        );
    }

    std::fs::create_dir_all(&args.out)?;
    let workers = worker_count().min(ids.len());
    let jobs: Vec<(String, ndarray::Array3<u8>)> = ids.into_iter().zip(images).collect();
    let chunk_size = jobs.len().div_ceil(workers);

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for chunk in jobs.chunks(chunk_size) {
            let ckpt_ref: &Checkpoint = &ckpt;
            let out_dir = args.out.clone();
            let png_only = args.png_only;
            handles.push(scope.spawn(move || -> Result<usize> {
                let mut model = ckpt_ref.build_model()?;
                for (id, img) in chunk {
                    let (h, w, _) = img.dim();
                    let mut x = Array4::<f32>::zeros((1, 3, h, w));
                    for r in 0..h {
                        for c in 0..w {
                            for ch in 0..3 {
                                x[[0, ch, r, c]] = img[[r, c, ch]] as f32 / 255.0;
                            }
                        }
                    }
                    let pred = model.forward(&x, Mode::Eval)?;
                    let prob: Array2<f32> = pred
                        .index_axis(Axis(0), 0)
                        .index_axis(Axis(0), 0)
                        .to_owned();
                    write_gray(&out_dir.join(format!("{id}.png")), &prob_to_gray(&prob))?;
                    if !png_only {
                        write_prob_raw(&out_dir.join(format!("{id}.dpred")), &prob)?;
                    }
                }
                Ok(chunk.len())
            }));
        }
        let mut total = 0usize;
        for handle in handles {
            total += handle.join().expect("prediction worker panicked")?;
        }
        println!("predicted {} images into {}", total, args.out.display());
        Ok(())
    })
}
