//! Run-directory layout and the small file formats the CLI writes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use mixmodal_core::synth::shapes::IMAGE_SIDE;
use mixmodal_core::synth::{read_corpus, write_corpus, CorpusItem, Image};
use mixmodal_core::training::{metrics_json, metrics_line, StepLosses};
use mixmodal_core::Config;

use crate::Options;

pub const CONFIG: &str = "config.toml";
pub const TRAIN_CORPUS: &str = "train.ortsyn";
pub const HELD_OUT_CORPUS: &str = "heldout.ortsyn";
pub const VAE_CKPT: &str = "vae.ckpt";
pub const AE_CKPT: &str = "ae.ckpt";
pub const BASE_CKPT: &str = "base.ckpt";
pub const POST_CKPT: &str = "post.ckpt";
pub const SAMPLES: &str = "samples";

/// Resolves the run config: preset or file, then the seed override.
pub fn load_config(opts: &Options) -> Result<Config> {
    let mut cfg = if opts.paper_defaults {
        Config::paper_scale()
    } else {
        let path = opts.config.clone().unwrap_or_else(|| opts.out.join(CONFIG));
        if opts.config.is_some() || path.exists() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            Config::from_toml(&text)?
        } else {
            Config::default()
        }
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn in_out(opts: &Options, name: &str) -> PathBuf {
    opts.out.join(name)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn save_corpus(path: &Path, items: &[CorpusItem]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_corpus(&mut w, items)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    Ok(read_corpus(BufReader::new(f))?)
}

/// Reads an 8-bit grayscale PNM of the model's image size.
pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm).context("decoding PGM")?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != IMAGE_SIDE || h != IMAGE_SIDE {
        bail!("expected a {IMAGE_SIDE}x{IMAGE_SIDE} image, got {w}x{h}");
    }
    let gray = img.into_luma8();
    Ok(Image::new(gray.as_raw().iter().map(|&b| b as f32 / 255.0).collect())?)
}

/// Append-only per-step loss log, plain or JSON lines.
pub struct MetricsLog {
    w: BufWriter<File>,
    json: bool,
}

impl MetricsLog {
    /// Opens `<out>/<stage>.metrics[.jsonl]`, truncating unless `resume`.
    pub fn open(opts: &Options, stage: &str, resume: bool) -> Result<(Self, PathBuf)> {
        let name = if opts.jsonl {
            format!("{stage}.metrics.jsonl")
        } else {
            format!("{stage}.metrics")
        };
        let path = opts.out.join(name);
        let f = OpenOptions::new()
            .create(true)
            .append(resume)
            .write(true)
            .truncate(!resume)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok((
            Self {
                w: BufWriter::new(f),
                json: opts.jsonl,
            },
            path,
        ))
    }

    pub fn record(&mut self, step: usize, l: &StepLosses) -> std::io::Result<()> {
        let line = if self.json { metrics_json(step, l) } else { metrics_line(step, l) };
        writeln!(self.w, "{line}")
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// One metrics line: `(step, ar, diff, total)`.
pub type MetricsRow = (usize, Option<f64>, Option<f64>, f64);

/// Parses a plain metrics log back into rows.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines()
        .map(|line| {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 {
                bail!("bad metrics line `{line}`");
            }
            let opt = |s: &str| -> Result<Option<f64>> { Ok(if s == "-" { None } else { Some(s.parse()?) }) };
            Ok((f[0].parse()?, opt(f[1])?, opt(f[2])?, f[3].parse()?))
        })
        .collect()
}
