//! The `mixmodal` command line: every pipeline stage as a subcommand
//! working inside one run directory.

pub mod commands;
pub mod files;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mixmodal", version, about = "Unified text/image model on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Options {
    /// TOML config; defaults to `<out>/config.toml` when present.
    #[arg(long, global = true, conflicts_with = "paper_defaults")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding corpora, checkpoints, logs and samples.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Input checkpoint; defaults to the previous stage's file in `<out>`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the step count of the command's training stage.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Start from the published-scale preset instead of the desk defaults.
    #[arg(long, global = true)]
    pub paper_defaults: bool,
    /// Where `synth-data` writes the training corpus.
    #[arg(long, global = true)]
    pub corpus_out: Option<PathBuf>,
    /// Write the metrics log as JSON lines.
    #[arg(long, global = true)]
    pub jsonl: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the training and held-out corpora.
    SynthData,
    /// Train the quantized patch autoencoder.
    TrainVae,
    /// Train the continuous decoder with the encoder frozen.
    FinetuneDecoder,
    /// Train vision embedding and patch head on image-only sequences.
    TrainBase,
    /// Train everything except the autoencoder on mixed layouts.
    PostTrain,
    /// Decode from a caption, a raw prompt, or an image.
    Generate {
        /// Caption words or raw tokens (`[SEP]`, `[BOI]` allowed).
        #[arg(long, conflicts_with = "image")]
        prompt: Option<String>,
        /// PGM image to caption.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Held-out captions to use when no prompt is given.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Reconstruction, loss and captioning metrics on the held-out set.
    Eval {
        /// Held-out corpus; defaults to `<out>/heldout.ortsyn`.
        #[arg(long)]
        held_out: Option<PathBuf>,
        /// Image→caption prompts for the validity rate.
        #[arg(long, default_value_t = 32)]
        prompts: usize,
    },
    /// Train and compare controlled variants.
    Ablate {
        #[arg(long, value_parser = ["objective", "embedding", "head"])]
        kind: String,
    },
    /// Finite-difference checks of every kernel and the diffusion loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

/// One-line description of a failure: `error: <kind>: <message>`.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<mixmodal_core::Error>().map(|e| e.kind()))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("failed");
    let msg = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    format!("error: {kind}: {}", msg.replace(['\n', '\r'], " "))
}
