//! Controlled variants: training objective, vision embedding and patch
//! head. Every variant shares the seed, data order and autoencoder.

use std::fmt::Write as _;

use mixmodal_tensor::Scalar;

use crate::config::{AblationConfig, Config, EmbeddingKind, HeadKind};
use crate::decode::{generate, DecodeModel};
use crate::error::Result;
use crate::model::Model;
use crate::rng::{stream_rng, Stream};
use crate::sequence::{Item, MixedSequence};
use crate::synth::{psnr, render, Autoencoder, CorpusItem, ShapeSpec};
use crate::training::{evaluate, smoothed_ends, EvalLosses, StageKind, TrainData, Trainer};
use crate::vocab::{BOI, EOI, EOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Objective,
    Embedding,
    Head,
}

/// A variant name and the config change it applies.
pub type Variant = (&'static str, fn(&mut Config));

impl AblationKind {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "objective" => Some(Self::Objective),
            "embedding" => Some(Self::Embedding),
            "head" => Some(Self::Head),
            _ => None,
        }
    }

    /// Variant names and the config change each one applies.
    pub fn variants(self) -> Vec<Variant> {
        match self {
            AblationKind::Objective => vec![
                ("und-only", |c| c.training.diff_loss = false),
                ("gen-only", |c| c.training.ar_loss = false),
                ("unified", |_| {}),
            ],
            AblationKind::Embedding => vec![
                ("softmax", |c| c.embedding.kind = EmbeddingKind::Softmax),
                ("argmin", |c| c.embedding.kind = EmbeddingKind::Argmin),
                ("linear", |c| c.embedding.kind = EmbeddingKind::Linear),
            ],
            AblationKind::Head => vec![
                ("diffusion", |c| c.heads.kind = HeadKind::Diffusion),
                ("mse", |c| c.heads.kind = HeadKind::Mse),
            ],
        }
    }
}

/// Sizes of the measurement passes run after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasureSettings {
    /// Held-out items used for the loss evaluation.
    pub eval_items: usize,
    /// Noise draws per patch in the loss evaluation.
    pub eval_draws: usize,
    /// Image→caption prompts for the validity rate.
    pub caption_prompts: usize,
    /// Samples of the first patch for the variance measurement.
    pub variance_samples: usize,
    /// Caption→image prompts for the reconstruction PSNR.
    pub image_prompts: usize,
}

impl MeasureSettings {
    pub fn from_config(c: &AblationConfig) -> Self {
        Self {
            eval_items: c.eval_items,
            eval_draws: c.eval_draws,
            caption_prompts: c.caption_prompts,
            variance_samples: c.variance_samples,
            image_prompts: c.image_prompts,
        }
    }
}

impl Default for MeasureSettings {
    fn default() -> Self {
        Self::from_config(&AblationConfig::default())
    }
}

/// Applies the ablation run lengths to a training config.
pub fn with_ablation_steps(mut c: Config) -> Config {
    c.training.base.steps = c.ablation.base_steps;
    c.training.post.steps = c.ablation.post_steps;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub name: String,
    /// Smoothed final training losses; `None` when the term was off.
    pub final_ar: Option<f64>,
    pub final_diff: Option<f64>,
    pub held_out: EvalLosses,
    pub caption_validity: f64,
    pub caption_accuracy: f64,
    /// Per-coordinate variance of the first generated patch.
    pub sample_variance: Vec<f64>,
    /// Mean PSNR of generated images against the clean render of their caption.
    pub image_psnr: f64,
}

impl VariantReport {
    pub fn mean_variance(&self) -> f64 {
        self.sample_variance.iter().sum::<f64>() / self.sample_variance.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = String::from(
            "variant\tfinal_ar\tfinal_diff\theld_ar\theld_diff\theld_total\tcaption_valid\tcaption_acc\tsample_var\timage_psnr\n",
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{:.3}\t{:.3e}\t{:.2}",
                v.name,
                opt(v.final_ar),
                opt(v.final_diff),
                v.held_out.ar,
                v.held_out.diff,
                v.held_out.total,
                v.caption_validity,
                v.caption_accuracy,
                v.mean_variance(),
                v.image_psnr
            );
        }
        s
    }
}

/// Trains `base` then `post` for the configured step counts. Stages with
/// no active loss term are skipped.
pub fn train_variant<T: Scalar>(
    config: Config,
    ae: &Autoencoder<T>,
    data: &TrainData<T>,
    seed: u64,
) -> Result<(Model<T>, Vec<f64>, Vec<f64>)> {
    let mut model = Model::init(config, ae, seed)?;
    let (mut ar, mut diff) = (Vec::new(), Vec::new());
    if model.config.training.diff_loss && model.config.training.base.steps > 0 {
        let steps = model.config.training.base.steps;
        let mut t = Trainer::new(model, StageKind::Base, seed);
        t.run(data, steps, |_, _| {})?;
        model = t.model;
    }
    let steps = model.config.training.post.steps;
    let mut t = Trainer::new(model, StageKind::Post, seed);
    let rep = t.run(data, steps, |_, _| {})?;
    ar.extend(rep.ar_curve());
    diff.extend(rep.diff_curve());
    Ok((t.model, ar, diff))
}

/// Tokens after the last `[SEP]`, up to and excluding `[EOS]`.
pub fn generated_caption<T: Clone>(seq: &MixedSequence<T>, prompt_len: usize) -> Vec<usize> {
    seq.items()[prompt_len..]
        .iter()
        .map_while(|it| it.token().filter(|&t| t != EOS))
        .collect()
}

pub fn image_prompt<T: Scalar>(features: &crate::synth::PatchFeatures<T>) -> MixedSequence<T> {
    let mut items = vec![Item::Token(BOI)];
    items.extend(features.rows().into_iter().map(Item::Patch));
    items.push(Item::Token(EOI));
    items.push(Item::Token(SEP));
    MixedSequence::prompt(items)
}

pub fn caption_prompt<T: Scalar>(caption: &[usize]) -> MixedSequence<T> {
    let mut items: Vec<Item<T>> = caption.iter().map(|&t| Item::Token(t)).collect();
    items.push(Item::Token(SEP));
    MixedSequence::prompt(items)
}

/// `(validity, accuracy)` of greedy captions for the first `n` items.
pub fn caption_rates<T: Scalar>(model: &Model<T>, data: &TrainData<T>, n: usize, seed: u64) -> Result<(f64, f64)> {
    let n = n.min(data.len());
    let (mut valid, mut right) = (0, 0);
    for i in 0..n {
        let prompt = image_prompt(&data.features[i]);
        let (seq, _) = match generate(model, &prompt, model.limits(), seed + i as u64) {
            Ok(r) => r,
            Err(crate::error::Error::BudgetExhausted { .. }) => continue,
            Err(e) => return Err(e),
        };
        let cap = generated_caption(&seq, prompt.len());
        if let Ok(spec) = ShapeSpec::parse_caption(&cap) {
            valid += 1;
            if spec.caption() == data.captions[i] {
                right += 1;
            }
        }
    }
    Ok((valid as f64 / n.max(1) as f64, right as f64 / n.max(1) as f64))
}

/// Per-coordinate variance of `samples` draws of the first patch after
/// `caption [SEP] [BOI]`.
pub fn first_patch_variance<T: Scalar>(model: &Model<T>, caption: &[usize], samples: usize, seed: u64) -> Result<Vec<f64>> {
    let mut prompt = caption_prompt::<T>(caption);
    prompt.push(Item::Token(BOI));
    let state = model.output_state(&prompt)?;
    let mut rng = stream_rng(seed, Stream::Sample.id());
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| Ok(model.sample_patch(&state, &mut rng)?.iter().map(|v| v.as_f64()).collect()))
        .collect::<Result<_>>()?;
    Ok(coordinate_variance(&draws))
}

pub fn coordinate_variance(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.len() as f64;
    let d = draws.first().map_or(0, Vec::len);
    (0..d)
        .map(|c| {
            let mean = draws.iter().map(|v| v[c]).sum::<f64>() / n;
            draws.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Mean PSNR of caption→image generations against clean renders.
pub fn image_psnr<T: Scalar>(model: &Model<T>, specs: &[ShapeSpec], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (i, spec) in specs.iter().enumerate() {
        let mut prompt = caption_prompt::<T>(&spec.caption());
        prompt.push(Item::Token(BOI));
        let (seq, _) = generate(model, &prompt, model.limits(), seed + i as u64)?;
        if let Some(img) = model.decode_images(&seq)?.first() {
            total += psnr(img, &render(spec));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[allow(clippy::too_many_arguments)]
pub fn measure<T: Scalar>(
    name: &str,
    model: &Model<T>,
    ar: &[f64],
    diff: &[f64],
    held_out: &TrainData<T>,
    held_specs: &[ShapeSpec],
    settings: &MeasureSettings,
    seed: u64,
) -> Result<VariantReport> {
    let window = model.config.training.smoothing_window;
    let sub = TrainData {
        features: held_out.features[..settings.eval_items.min(held_out.len())].to_vec(),
        captions: held_out.captions[..settings.eval_items.min(held_out.len())].to_vec(),
    };
    let held = evaluate(model, &sub, seed, settings.eval_draws)?;
    let (validity, accuracy) = caption_rates(model, held_out, settings.caption_prompts, seed)?;
    let var = first_patch_variance(model, &held_out.captions[0], settings.variance_samples, seed)?;
    let specs = &held_specs[..settings.image_prompts.min(held_specs.len())];
    let image = image_psnr(model, specs, seed)?;
    Ok(VariantReport {
        name: name.to_string(),
        final_ar: smoothed_ends(ar, window).map(|e| e.1),
        final_diff: smoothed_ends(diff, window).map(|e| e.1),
        held_out: held,
        caption_validity: validity,
        caption_accuracy: accuracy,
        sample_variance: var,
        image_psnr: image,
    })
}

/// Trains and measures every variant of `kind` from the same starting
/// config, seed and data.
pub fn run_ablation<T: Scalar>(
    kind: AblationKind,
    base: &Config,
    ae: &Autoencoder<T>,
    train: &TrainData<T>,
    held_out: &[CorpusItem],
    settings: &MeasureSettings,
    seed: u64,
) -> Result<AblationReport> {
    let held = TrainData::from_corpus(held_out, ae)?;
    let specs: Vec<ShapeSpec> = held_out.iter().map(|c| c.spec).collect();
    let mut variants = Vec::new();
    for (name, apply) in kind.variants() {
        let mut cfg = base.clone();
        apply(&mut cfg);
        let (model, ar, diff) = train_variant(cfg, ae, train, seed)?;
        variants.push(measure(name, &model, &ar, &diff, &held, &specs, settings, seed)?);
    }
    Ok(AblationReport { kind, variants })
}
