mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tilemark",
    version,
    about = "Tile-drainage segmentation: synthesize data, train, predict, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drainage-scene dataset
    Synth(commands::synth::SynthArgs),
    /// Train a model according to a run-configuration file
    Train(commands::train::TrainArgs),
    /// Run a checkpoint over a directory of images
    Predict(commands::predict::PredictArgs),
    /// Evaluate predictions against ground-truth masks
    Eval(commands::eval::EvalArgs),
    /// Print a preset's expanded run configuration
    Config(ConfigArgs),
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Preset name (basic_unet, improved_unet, transunet, or their _desk
    /// variants)
    #[arg(long, default_value = "improved_unet_desk")]
    preset: String,
    /// Write to a file instead of stdout
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Predict(args) => commands::predict::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Config(args) => {
            config::RunConfig::from_preset(&args.preset).and_then(|cfg| {
                let text = cfg.serialize();
                match &args.out {
                    Some(path) => std::fs::write(path, text).map_err(Into::into),
                    None => {
                        print!("{text}");
                        Ok(())
                    }
                }
            })
        }
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

/// 0 success, 2 usage/config/data error, 3 numerical failure.
fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<tilemark_core::Error>() {
        Some(tilemark_core::Error::NonFiniteLoss { .. }) => 3,
        _ => 2,
    }
}
