//! Command-line entry point: dataset synthesis, training, evaluation,
//! single-file extraction and report rendering.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use tse::dataset::{synth_dataset, Manifest};
use tse::evaluation::{evaluate_checkpoint, extract_file, read_report, render_report};
use tse::separator::SeparatorConfig;
use tse::speaker_encoder::SpeakerEncoderConfig;
use tse::trainer::{fit, TrainConfig};

#[derive(Parser)]
#[command(name = "tse", about = "Target speaker extraction toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize two-speaker mixtures from a corpus of per-speaker WAV dirs.
    SynthData {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML config and train/validation manifests.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "train-manifest")]
        train_manifest: PathBuf,
        #[arg(long = "val-manifest")]
        val_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the desk-scale architecture preset.
        #[arg(long, default_value_t = false)]
        toy: bool,
    },
    /// Compute SI-SNRi / SDRi over a manifest and write a JSON report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the target speaker from one mixture WAV.
    Extract {
        #[arg(long)]
        mix: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report JSON as a table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::SynthData {
            corpus,
            out,
            n,
            seed,
        } => {
            let manifest = synth_dataset(&corpus, &out, n, seed)
                .with_context(|| format!("synthesizing {n} examples"))?;
            println!(
                "wrote {} examples and {}",
                manifest.records.len(),
                out.join("manifest.tsv").display()
            );
        }
        Command::Train {
            config,
            train_manifest,
            val_manifest,
            out,
            seed,
            toy,
        } => {
            let mut cfg = TrainConfig::from_toml_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            if toy {
                cfg.separator = SeparatorConfig::toy();
                cfg.speaker = SpeakerEncoderConfig::toy();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let train = Manifest::read(&train_manifest).context("reading train manifest")?;
            let val = Manifest::read(&val_manifest).context("reading val manifest")?;
            let report = fit(cfg, &train, &val, &out)?;
            println!(
                "trained {} steps / {} epochs; best val SI-SNRi {:?} (epoch {:?})",
                report.steps, report.epochs, report.best_val, report.best_epoch
            );
            println!("best: {}", report.best_path.display());
            println!("last: {}", report.last_path.display());
            println!("log:  {}", report.log_path.display());
        }
        Command::Eval {
            manifest,
            checkpoint,
            out,
        } => {
            let report = evaluate_checkpoint(&manifest, &checkpoint, Some(&out))?;
            print!("{}", render_report(&report));
            println!("report written to {}", out.display());
        }
        Command::Extract {
            mix,
            reference,
            checkpoint,
            out,
        } => {
            extract_file(&mix, &reference, &checkpoint, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Report { input } => {
            let report = read_report(&input)?;
            print!("{}", render_report(&report));
        }
    }
    Ok(())
}
