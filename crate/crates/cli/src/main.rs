use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use xai3d_cli::commands::*;
use xai3d_cli::slices::{emit_slices, Axis};
use xai3d_cli::{CliError, Layout, RunConfig};
use xai3d_core::cohort::read_volume;

#[derive(Parser)]
#[command(
    name = "xai3d",
    version,
    about = "Explainability pipeline for volumetric classifiers"
)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort and its split manifest.
    Generate,
    /// Train one classifier per modality and hemisphere.
    Train,
    /// Per-subject GradCAM and Shapley maps.
    Explain,
    /// PCA totals and the fused explanation.
    Aggregate,
    /// Faithfulness and complexity of the global maps.
    Evaluate,
    /// Score every fusion weighting.
    Ablate,
    /// Region histograms of the fused maps on a synthetic atlas.
    AtlasReport,
    /// All stages in order.
    Run,
    /// Export slices of one volume as PGM images.
    Slices {
        volume: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
        #[arg(long)]
        dir: PathBuf,
    },
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let layout = Layout::new(cfg.output_dir.clone());
    match cli.cmd {
        Cmd::Generate => cmd_generate(&cfg, &layout).map(drop),
        Cmd::Train => cmd_train(&cfg, &layout),
        Cmd::Explain => cmd_explain(&cfg, &layout),
        Cmd::Aggregate => cmd_aggregate(&cfg, &layout),
        Cmd::Evaluate => cmd_evaluate(&cfg, &layout).map(drop),
        Cmd::Ablate => cmd_ablate(&cfg, &layout).map(drop),
        Cmd::AtlasReport => cmd_atlas_report(&cfg, &layout),
        Cmd::Run => cmd_run(&cfg, &layout),
        Cmd::Slices { volume, axis, dir } => {
            if !volume.exists() {
                return Err(CliError::Missing {
                    path: volume,
                    stage: "explain",
                });
            }
            let v = read_volume(&volume)?.volume;
            emit_slices(&v, axis, &dir).map(drop)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = real_main(cli) {
        eprintln!("error: {e}");
        exit(e.exit_code());
    }
}
