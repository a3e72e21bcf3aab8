use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::data::SynthConfig;
use crate::error::Result;
use crate::metrics::render_table;
use crate::reconstruction::GuidanceFlags;

use super::config::{load_config, ExperimentConfig};
use super::pipeline::{evaluate_dirs, synth, Experiment, Stream};

#[derive(Debug, Parser)]
#[command(
    name = "brainstreams",
    version,
    about = "Three-level fMRI decoding pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Take `data.synth` (and the seed, unless given) from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the ventral-to-text stream.
    TrainHigh {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the image-embedding stream and its diffusion prior.
    TrainMid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the layout stream.
    TrainLow {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct the test split from trained checkpoints.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated guidance levels; defaults to the config's.
        #[arg(long)]
        flags: Option<GuidanceFlags>,
    },
    /// Score a directory of reconstructions against ground-truth images.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory; defaults to the reconstruction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every non-empty subset of guidance levels.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, seed, config } => {
            let (synth_config, config_seed) = match config {
                Some(p) => {
                    let c = load_config(&p)?;
                    (c.data.synth, c.seed)
                }
                None => (SynthConfig::default(), 0),
            };
            synth(&synth_config, seed.unwrap_or(config_seed), &out)?;
        }
        Command::TrainHigh { config } => train(config, Stream::High)?,
        Command::TrainMid { config } => train(config, Stream::Mid)?,
        Command::TrainLow { config } => train(config, Stream::Low)?,
        Command::Infer { config, flags } => {
            let exp = Experiment::open(load_config(&config)?)?;
            let flags = flags.unwrap_or(exp.config.inference.flags);
            let (recons, _) = exp.infer(flags)?;
            println!(
                "wrote {} reconstructions to {}",
                recons.len(),
                exp.config
                    .output_path()
                    .join("recon")
                    .join(flags.to_string())
                    .display()
            );
        }
        Command::Evaluate {
            recon,
            gt,
            config,
            out,
        } => {
            let config = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            let out = out.unwrap_or_else(|| recon.clone());
            let report = evaluate_dirs(&recon, &gt, &config, &out)?;
            print!("{}", render_table(&[("reconstruction".into(), report)]));
        }
        Command::Ablate { config } => {
            let exp = Experiment::open(load_config(&config)?)?;
            let rows = exp.ablate()?;
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}

fn train(config: PathBuf, stream: Stream) -> Result<()> {
    let exp = Experiment::open(load_config(&config)?)?;
    let run = exp.train(stream)?;
    println!(
        "{}: validation loss {:.6} (constant baseline {:.6})",
        stream.name(),
        run.scalars["validation_loss"],
        run.scalars["baseline_loss"]
    );
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status: 0 ok, 1 usage, 2 validation, 3 runtime.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
