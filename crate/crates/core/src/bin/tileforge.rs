use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tileforge::pipeline::{cmd_synth, InferTarget, Outcome, Pipeline, PipelineError, RunOptions};
use tileforge::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "tileforge", version, about = "Whole-slide tiling, tile classifier training and slide-level inference")]
struct Cli {
    /// Worker threads for every parallel stage.
    #[arg(long, global = true, env = "TILEFORGE_JOBS")]
    jobs: Option<usize>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// No JSON log lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (JSON).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint to use instead of the run's own.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic slide corpus and a matching config.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        slides_per_class: usize,
        /// Level-0 side length in pixels.
        #[arg(long, default_value_t = 2048)]
        size: u32,
    },
    /// Cut every listed slide into a tile store.
    Tile(ConfigArg),
    /// Hold out slides, balance classes and split into train/val/test.
    Curate(ConfigArg),
    /// Train the tile classifier.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Tile metrics on TEST and slide decisions on the held-out slides.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Score one slide.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        model: ModelArg,
        /// Slide id from the listing.
        #[arg(long, conflicts_with = "slide")]
        slide_id: Option<String>,
        /// Any slide file or raw-slide directory.
        #[arg(long)]
        slide: Option<PathBuf>,
        #[arg(long, requires = "slide")]
        annotations: Option<PathBuf>,
    },
    /// Grad-CAM overlays for tiles of a stored slide.
    Gradcam {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        slide_id: String,
        /// Grid position `x,y`; repeatable. Omit for every kept tile.
        #[arg(long = "tile", value_parser = parse_grid)]
        tiles: Vec<(u32, u32)>,
    },
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    Ok((
        x.trim().parse().map_err(|e| format!("{e}"))?,
        y.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn report(result: Result<impl Outcome, PipelineError>) -> ExitCode {
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut opts = RunOptions {
        jobs: cli.jobs,
        seed: cli.seed,
        dry_run: cli.dry_run,
        quiet: cli.quiet,
        ..RunOptions::default()
    };
    let pipeline = |config: &ConfigArg, opts: RunOptions| Pipeline::from_file(&config.config, opts);
    match cli.command {
        Command::Synth {
            out,
            slides_per_class,
            size,
        } => {
            let synth = SynthConfig {
                slides_per_class,
                width: size,
                height: size,
                ..SynthConfig::default()
            };
            report(cmd_synth(&out, &synth, &opts))
        }
        Command::Tile(c) => report(pipeline(&c, opts).and_then(|p| p.tile())),
        Command::Curate(c) => report(pipeline(&c, opts).and_then(|p| p.curate())),
        Command::Train { config, resume } => {
            opts.resume = resume;
            report(pipeline(&config, opts).and_then(|p| p.train()))
        }
        Command::Eval { config, model } => {
            opts.checkpoint = model.checkpoint;
            report(pipeline(&config, opts).and_then(|p| p.eval()))
        }
        Command::Infer {
            config,
            model,
            slide_id,
            slide,
            annotations,
        } => {
            opts.checkpoint = model.checkpoint;
            let target = match (slide_id, slide) {
                (Some(id), _) => InferTarget::Listed(id),
                (None, Some(slide)) => InferTarget::File { slide, annotations },
                (None, None) => {
                    eprintln!("error: infer needs --slide-id or --slide");
                    return ExitCode::from(1);
                }
            };
            report(pipeline(&config, opts).and_then(|p| p.infer(&target)))
        }
        Command::Gradcam {
            config,
            model,
            slide_id,
            tiles,
        } => {
            opts.checkpoint = model.checkpoint;
            report(pipeline(&config, opts).and_then(|p| p.gradcam(&slide_id, &tiles)))
        }
    }
}
