use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilemark_core::data::{save_sample, write_manifest};
use tilemark_core::synth::{generate_synthetic_scene, LinePattern, SynthSceneConfig};

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory (images/, masks/, manifest.txt)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long)]
    pub count: usize,
    /// Square image side, multiple of 16
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Drainage pattern: parallel | herringbone
    #[arg(long, default_value = "parallel")]
    pub pattern: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perpendicular spacing between line centers, px
    #[arg(long, default_value_t = 16.0)]
    pub spacing: f64,
    /// Line width, px
    #[arg(long, default_value_t = 2.0)]
    pub width: f64,
    /// Fixed line orientation in degrees; omit for a random one per sample
    #[arg(long)]
    pub orientation: Option<f64>,
    /// Brightness gain on line pixels
    #[arg(long, default_value_t = 0.35)]
    pub gain: f64,
    /// Background noise scale
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Confounder roads per scene (never in the mask)
    #[arg(long, default_value_t = 1)]
    pub roads: usize,
}

pub fn run(args: SynthArgs) -> Result<()> {
    let pattern = LinePattern::parse(&args.pattern)?;
    let mut orient_rng = ChaCha8Rng::seed_from_u64(args.seed);
    orient_rng.set_stream(7);

    std::fs::create_dir_all(&args.out)?;
    let mut ids = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let orientation = args
            .orientation
            .unwrap_or_else(|| orient_rng.random_range(0.0..180.0));
        let config = SynthSceneConfig {
            size: args.size,
            pattern,
            line_spacing: args.spacing,
            line_width: args.width,
            orientation,
            line_brightness_gain: args.gain,
            background_noise_scale: args.noise,
            n_confounder_roads: args.roads,
            seed: args.seed.wrapping_add(i as u64),
        };
        let mut sample = generate_synthetic_scene(&config)?;
        sample.id = format!("{i:04}");
        save_sample(&args.out, &sample)?;
        ids.push(sample.id);
    }
    write_manifest(&args.out, &ids)?;
    println!(
        "wrote {} {}x{} samples to {}",
        args.count,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}
