use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pit::commands::{self, EvalArgs, TrainArgs};
use pit::config;
use pit::Result;

#[derive(Parser)]
#[command(name = "pit", version, about = "Pyramid-in-transformer video re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateCmd),
    /// Train a model and save a checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint (CMC and mAP).
    Eval(EvalCmd),
    /// Train and evaluate every division of a grid file.
    Ablate(AblateCmd),
    /// Export per-branch attention maps for one image.
    Attention(AttentionCmd),
}

#[derive(Args)]
struct GenerateCmd {
    /// key = value spec file; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_ids: Option<usize>,
    #[arg(long)]
    videos_per_id: Option<usize>,
    #[arg(long)]
    frames_per_video: Option<usize>,
    #[arg(long)]
    num_cameras: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    test_ids: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainCmd {
    /// key = value model config (`preset = toy` for the small model).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `epochs` from the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Save every N epochs in addition to the end of training.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Loss log path (default: <out>.log).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Average over N random identity halvings.
    #[arg(long)]
    trials: Option<usize>,
    /// Seed of the trial splits (default: config seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttentionCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM or PPM frame.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn generate(cmd: GenerateCmd, log: &mut dyn Write) -> Result<()> {
    let mut spec = match &cmd.spec {
        Some(p) => config::synthetic_spec(&config::read_entries(p)?, p)?,
        None => config::default_synthetic(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = cmd.$f { spec.$f = v; })* };
    }
    over!(num_ids, videos_per_id, frames_per_video, num_cameras, channels, height, width, noise, test_ids, seed);
    commands::generate(&spec, &cmd.out, log)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let log = &mut stdout.lock();
    match cli.command {
        Command::Generate(cmd) => generate(cmd, log),
        Command::Train(cmd) => {
            let mut cfg = config::read_model_config(&cmd.config)?;
            if let Some(e) = cmd.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = cmd.seed {
                cfg.seed = s;
            }
            let args = TrainArgs {
                config: cfg,
                data: cmd.data,
                out: cmd.out,
                checkpoint_every: cmd.checkpoint_every,
                log_file: cmd.log,
            };
            commands::train(&args, log).map(|_| ())
        }
        Command::Eval(cmd) => {
            let args = EvalArgs {
                checkpoint: cmd.checkpoint,
                data: cmd.data,
                out: cmd.out,
                trials: cmd.trials,
                seed: cmd.seed,
            };
            commands::eval(&args, log).map(|_| ())
        }
        Command::Ablate(cmd) => commands::ablate(&cmd.grid, &cmd.data, &cmd.out, log).map(|_| ()),
        Command::Attention(cmd) => {
            commands::attention(&cmd.checkpoint, &cmd.image, cmd.camera, &cmd.out, log).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pit: error: {e}");
            ExitCode::FAILURE
        }
    }
}
