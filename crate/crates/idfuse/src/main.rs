use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use idfuse::checkpoint::Checkpoint;
use idfuse::config_file::{load_config, parse_grid};
use idfuse::imageio::{load_contour, load_rgb};
use idfuse::pipeline::{self, TrainOptions};
use idfuse::report::text_table;
use idfuse_core::data::ContourSpec;

#[derive(Parser)]
#[command(
    name = "idfuse",
    version,
    about = "Identity-guided face synthesis from contour conditions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Where pretrained generator and recognition weights are cached.
    #[arg(long, default_value = "runs/cache")]
    cache_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train both encoders against the frozen generator.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and evaluate one model per ablation cell.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated cells: baseline, ifblock, input_latent, full, or
        /// three T/F letters such as TTF.
        #[arg(long, default_value = "baseline,ifblock,input_latent,full")]
        grid: String,
    },
    /// Refine one contour/identity pair and save an image grid.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        contour: PathBuf,
        #[arg(long)]
        identity: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat --contour as a face photo and derive the contour from it.
        #[arg(long)]
        from_face: bool,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV path; a text table is written beside it.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { common, resume } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides)?;
            let opts = TrainOptions {
                out_dir: common.out_dir,
                cache_dir: Some(common.cache_dir),
                resume,
                stop_after: None,
            };
            let summary = pipeline::train(&cfg, &opts, |_, _| {})?;
            println!("final checkpoint: {}", summary.final_checkpoint.display());
            println!("loss log: {}", summary.loss_log.display());
        }
        Command::Ablate { common, grid } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides)?;
            let grid = parse_grid(&grid)?;
            let opts = TrainOptions {
                out_dir: common.out_dir,
                cache_dir: Some(common.cache_dir),
                ..TrainOptions::default()
            };
            let rows = pipeline::ablate(&cfg, &grid, &opts)?;
            print!("{}", text_table(&rows));
        }
        Command::Infer {
            checkpoint,
            contour,
            identity,
            out,
            from_face,
        } => {
            let trainer = Checkpoint::load(&checkpoint)?.into_trainer()?;
            let cfg = &trainer.config;
            let condition = if from_face {
                let face = load_rgb(&contour)?;
                let spec = ContourSpec {
                    modality: cfg.modality,
                    lr_size: cfg.scale.lr_contour_resolution,
                    mask_classes: cfg.mask_classes,
                };
                spec.make(&idfuse_core::data::FaceRecord {
                    key: 0,
                    label: 0,
                    image: face,
                })?
            } else {
                load_contour(&contour, cfg.modality, cfg.mask_classes)?
            };
            let identity = load_rgb(&identity)?;
            let trace = pipeline::infer(&trainer, &condition, &identity, &out)
                .with_context(|| format!("refining into {}", out.display()))?;
            println!("wrote {} ({} iterations)", out.display(), trace.len());
        }
        Command::Eval { checkpoint, out } => {
            let row = pipeline::eval_checkpoint(&checkpoint, &out)?;
            print!("{}", text_table(std::slice::from_ref(&row)));
        }
    }
    Ok(())
}
