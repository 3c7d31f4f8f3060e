use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seg4reg::cli;

#[derive(Parser)]
#[command(
    name = "seg4reg",
    about = "Joint spine segmentation and Cobb-angle regression with cross-task consistency training"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize landmark masks and write a validated manifest.
    Prepare {
        /// Dataset directory (angles.csv + images/ + landmarks/).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for masks/ and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with analytic angle labels.
    Synth {
        /// Generator spec (JSON); defaults to the built-in desk-scale spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the five-stage training schedule (or a single stage).
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Stage to run: 1..5 or "all".
        #[arg(long, default_value = "all")]
        stage: String,
        /// Continue a run directory from its last completed stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a run directory's newest checkpoint on a dataset.
    Eval {
        /// Run directory holding stage checkpoints and config.json.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report output path (JSON; a CSV lands next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit CAM heat overlays and segmentation error overlays.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Additionally render the mask-only branch CAM per sample.
        #[arg(long)]
        with_ar_baseline: bool,
    },
    /// Run an on/off grid over the couplings and input compositions.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Grid cells (JSON list of {ar, roie, tcl, input}).
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated seed list.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Allow grids over datasets larger than the desk-scale guard.
        #[arg(long)]
        force: bool,
    },
}

fn run(args: Args) -> seg4reg::Result<()> {
    match args.command {
        Command::Prepare { data, out } => cli::cmd_prepare(&data, &out),
        Command::Synth { spec, n, out, seed } => cli::cmd_synth(spec.as_deref(), n, &out, seed),
        Command::Train {
            config,
            stage,
            resume,
        } => cli::cmd_train(
            &config,
            cli::StageSelector::parse(&stage)?,
            resume.as_deref(),
        ),
        Command::Eval { ckpt, data, out } => cli::cmd_eval(&ckpt, &data, &out),
        Command::Cam {
            ckpt,
            data,
            out,
            with_ar_baseline,
        } => cli::cmd_cam(&ckpt, &data, &out, with_ar_baseline),
        Command::Ablate {
            config,
            grid,
            seeds,
            out,
            force,
        } => cli::cmd_ablate(&config, &grid, &cli::parse_seeds(&seeds)?, &out, force),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
