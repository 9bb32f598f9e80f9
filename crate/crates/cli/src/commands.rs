use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use mixmodal_core::ablation::{
    caption_prompt, generated_caption, image_prompt, run_ablation, with_ablation_steps, AblationKind, MeasureSettings,
};
use mixmodal_core::decode::generate;
use mixmodal_core::rng::RngStreams;
use mixmodal_core::synth::autoencoder::{finetune_continuous_decoder, train_vq_autoencoder};
use mixmodal_core::synth::{make_corpus, psnr, ssim, CorpusItem, DecoderKind, ShapeSpec, Split};
use mixmodal_core::training::{evaluate, smoothed_ends, StageKind, TrainData};
use mixmodal_core::vocab::{self, tokenize, SEP};
use mixmodal_core::{Autoencoder32, Checkpoint32, Config, Item, Model32, MixedSequence32, Trainer32};
use mixmodal_tensor::kernel_suite;

use crate::files::{self, MetricsLog};
use crate::{Cli, Command, Options};

/// Kernel and loss gradients must match finite differences this closely.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const ARTIFACT: &str = "artifact";

pub fn run(cli: &Cli) -> Result<()> {
    let o = &cli.opts;
    match &cli.command {
        Command::SynthData => synth_data(o),
        Command::TrainVae => train_vae(o),
        Command::FinetuneDecoder => finetune_decoder(o),
        Command::TrainBase => train_stage(o, StageKind::Base),
        Command::PostTrain => train_stage(o, StageKind::Post),
        Command::Generate { prompt, image, count } => generate_cmd(o, prompt.as_deref(), image.as_deref(), *count),
        Command::Eval { held_out, prompts } => eval(o, held_out.as_deref(), *prompts),
        Command::Ablate { kind } => ablate(o, kind),
        Command::Gradcheck { cases } => gradcheck(o, *cases),
    }
}

fn train_corpus_path(o: &Options) -> PathBuf {
    o.corpus_out.clone().unwrap_or_else(|| files::in_out(o, files::TRAIN_CORPUS))
}

fn input_checkpoint(o: &Options, default: &str) -> PathBuf {
    o.checkpoint.clone().unwrap_or_else(|| files::in_out(o, default))
}

fn synth_data(o: &Options) -> Result<()> {
    let cfg = files::load_config(o)?;
    files::ensure_dir(&o.out)?;
    let train = make_corpus(cfg.seed, cfg.synth.train_size, Split::Train, &cfg.synth);
    let held = make_corpus(cfg.seed, cfg.synth.held_out_size, Split::HeldOut, &cfg.synth);
    let train_path = train_corpus_path(o);
    files::save_corpus(&train_path, &train)?;
    files::save_corpus(&files::in_out(o, files::HELD_OUT_CORPUS), &held)?;
    fs::write(files::in_out(o, files::CONFIG), cfg.to_toml())?;
    println!(
        "wrote {} train items to {} and {} held-out items",
        train.len(),
        train_path.display(),
        held.len()
    );
    Ok(())
}

fn save_autoencoder(path: &Path, cfg: &Config, ae: &Autoencoder32, artifact: &str) -> Result<()> {
    let ck = Checkpoint32 {
        config: cfg.clone(),
        metadata: BTreeMap::from([(ARTIFACT.to_string(), artifact.to_string())]),
        rng: RngStreams::new(cfg.seed).state(),
        params: ae.params.clone(),
        optimizer: None,
    };
    ck.save(path)?;
    Ok(())
}

fn load_autoencoder(path: &Path) -> Result<Autoencoder32> {
    let ck = Checkpoint32::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Autoencoder32::from_store(&ck.params)?)
}

/// Mean `(psnr, ssim)` of reconstructions through one decoder.
fn reconstruction(ae: &Autoencoder32, items: &[CorpusItem], kind: DecoderKind) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for it in items {
        let rec = match kind {
            DecoderKind::Quantized => ae.reconstruct_quantized(&it.image)?,
            DecoderKind::Continuous => ae.reconstruct_continuous(&it.image)?,
        };
        p += psnr(&rec, &it.image);
        s += ssim(&rec, &it.image);
    }
    let n = items.len().max(1) as f64;
    Ok((p / n, s / n))
}

fn train_vae(o: &Options) -> Result<()> {
    let mut cfg = files::load_config(o)?;
    if let Some(s) = o.steps {
        cfg.autoencoder.vq_steps = s;
    }
    let train = files::load_corpus(&train_corpus_path(o))?;
    let start = Instant::now();
    let (ae, rep) = train_vq_autoencoder::<f32>(&train, &cfg.autoencoder, cfg.seed)?;
    save_autoencoder(&files::in_out(o, files::VAE_CKPT), &cfg, &ae, "vae")?;
    let used = rep.code_usage.iter().filter(|&&c| c > 0).count();
    println!(
        "vq loss {:.6} -> {:.6}, codes used {used}/{}, {:.1}s",
        rep.initial_loss,
        rep.final_loss,
        rep.code_usage.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn finetune_decoder(o: &Options) -> Result<()> {
    let mut cfg = files::load_config(o)?;
    if let Some(s) = o.steps {
        cfg.autoencoder.finetune_steps = s;
    }
    let vae = load_autoencoder(&input_checkpoint(o, files::VAE_CKPT))?;
    let train = files::load_corpus(&train_corpus_path(o))?;
    let held = files::load_corpus(&files::in_out(o, files::HELD_OUT_CORPUS))?;
    let (ae, rep) = finetune_continuous_decoder(&vae, &train, &cfg.autoencoder, cfg.seed)?;
    save_autoencoder(&files::in_out(o, files::AE_CKPT), &cfg, &ae, "ae")?;
    let (pq, sq) = reconstruction(&ae, &held, DecoderKind::Quantized)?;
    let (pc, sc) = reconstruction(&ae, &held, DecoderKind::Continuous)?;
    println!("decoder loss {:.6} -> {:.6}", rep.initial_loss, rep.final_loss);
    println!("psnr_vq {pq:.3}\npsnr_continuous {pc:.3}\nssim_vq {sq:.4}\nssim_continuous {sc:.4}");
    Ok(())
}

/// Starts a stage from the previous artifact, or resumes it when the
/// input checkpoint was written by the same stage.
fn train_stage(o: &Options, stage: StageKind) -> Result<()> {
    let (default_in, out_name) = match stage {
        StageKind::Base => (files::AE_CKPT, files::BASE_CKPT),
        StageKind::Post => (files::BASE_CKPT, files::POST_CKPT),
    };
    let path = input_checkpoint(o, default_in);
    let ck = Checkpoint32::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let resume = ck.metadata.get("stage").map(String::as_str) == Some(stage.name());

    let mut trainer = if resume {
        ck.trainer()?
    } else {
        let model = match stage {
            StageKind::Base => {
                let cfg = files::load_config(o)?;
                let ae = Autoencoder32::from_store(&ck.params)?;
                let seed = cfg.seed;
                Model32::init(cfg, &ae, seed)?
            }
            StageKind::Post => ck.model()?,
        };
        let seed = model.config.seed;
        Trainer32::new(model, stage, seed)
    };
    if let Some(s) = o.steps {
        match stage {
            StageKind::Base => trainer.model.config.training.base.steps = s,
            StageKind::Post => trainer.model.config.training.post.steps = s,
        }
    }
    let target = match stage {
        StageKind::Base => trainer.model.config.training.base.steps,
        StageKind::Post => trainer.model.config.training.post.steps,
    };
    let remaining = target.saturating_sub(trainer.step);

    let train = files::load_corpus(&train_corpus_path(o))?;
    let data = TrainData::from_corpus(&train, &trainer.model.autoencoder()?)?;
    files::ensure_dir(&o.out)?;
    let (mut log, log_path) = MetricsLog::open(o, stage.name(), resume)?;
    let mut io_err = None;
    let rep = trainer.run(&data, remaining, |step, l| {
        if let Err(e) = log.record(step, l) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    log.finish()?;
    Checkpoint32::from_trainer(&trainer).save(&files::in_out(o, out_name))?;

    let window = trainer.model.config.training.smoothing_window;
    let fmt = |curve: Vec<f64>| match smoothed_ends(&curve, window) {
        Some((a, b)) => format!("{a:.6} -> {b:.6}"),
        None => "-".to_string(),
    };
    println!(
        "{} steps {}..{} ({:.1}s), smoothed ar {}, diff {}",
        stage.name(),
        trainer.step - remaining,
        trainer.step,
        rep.wall_clock_secs,
        fmt(rep.ar_curve()),
        fmt(rep.diff_curve())
    );
    Ok(())
}

/// Renders the generated part of a sequence with images collapsed.
fn render_items(items: &[Item<f32>]) -> String {
    let mut out = Vec::new();
    let mut patches = 0;
    for it in items {
        match it {
            Item::Patch(_) => patches += 1,
            Item::Token(t) => {
                if patches > 0 {
                    out.push(format!("<{patches} patches>"));
                    patches = 0;
                }
                out.push(vocab::word(*t));
            }
        }
    }
    if patches > 0 {
        out.push(format!("<{patches} patches>"));
    }
    out.join(" ")
}

fn text_prompt(text: &str) -> Result<MixedSequence32> {
    let mut tokens = tokenize(text)?;
    if tokens.is_empty() {
        bail!("empty prompt");
    }
    if ShapeSpec::parse_caption(&tokens).is_ok() {
        tokens.push(SEP);
    }
    Ok(MixedSequence32::prompt(tokens.into_iter().map(Item::Token).collect()))
}

fn generate_cmd(o: &Options, prompt: Option<&str>, image: Option<&Path>, count: usize) -> Result<()> {
    let model = Checkpoint32::load(&input_checkpoint(o, files::POST_CKPT))?.model()?;
    let seed = o.seed.unwrap_or(model.config.seed);
    let prompts: Vec<MixedSequence32> = if let Some(text) = prompt {
        vec![text_prompt(text)?]
    } else if let Some(path) = image {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let img = files::read_pgm(&bytes)?;
        vec![image_prompt(&model.autoencoder()?.encode(&img)?)]
    } else {
        let held = files::load_corpus(&files::in_out(o, files::HELD_OUT_CORPUS))?;
        held.iter().take(count).map(|it| caption_prompt(&it.caption)).collect()
    };

    let dir = files::in_out(o, files::SAMPLES);
    files::ensure_dir(&dir)?;
    for (i, p) in prompts.iter().enumerate() {
        let (seq, trace) = generate(&model, p, model.limits(), seed.wrapping_add(i as u64))?;
        let stem = format!("sample_{i:03}");
        fs::write(dir.join(format!("{stem}.tsv")), trace.to_tsv())?;
        let images = model.decode_images(&seq)?;
        let prompt_text = render_items(p.items());
        let output_text = render_items(&seq.items()[p.len()..]);
        fs::write(dir.join(format!("{stem}.txt")), format!("{prompt_text}\n{output_text}\n"))?;
        // Images closed inside the prompt are decoded too; skip them.
        let prompt_images = p.items().iter().filter(|it| it.token() == Some(vocab::EOI)).count();
        for (j, img) in images.iter().enumerate().skip(prompt_images) {
            fs::write(dir.join(format!("{stem}_{}.pgm", j - prompt_images)), img.to_pgm())?;
        }
        let violations = trace.violations(mixmodal_core::config::PATCHES_PER_IMAGE).len();
        println!(
            "{stem}\t{output_text}\timages {}\tviolations {violations}",
            images.len() - prompt_images
        );
    }
    Ok(())
}

fn eval(o: &Options, held_out: Option<&Path>, prompts: usize) -> Result<()> {
    let model = Checkpoint32::load(&input_checkpoint(o, files::POST_CKPT))?.model()?;
    let seed = o.seed.unwrap_or(model.config.seed);
    let held_path = held_out.map(Path::to_path_buf).unwrap_or_else(|| files::in_out(o, files::HELD_OUT_CORPUS));
    let held = files::load_corpus(&held_path)?;
    if held.is_empty() {
        bail!("held-out corpus {} is empty", held_path.display());
    }
    let ae = model.autoencoder()?;
    let mut report = String::new();

    let (pq, sq) = reconstruction(&ae, &held, DecoderKind::Quantized)?;
    writeln!(report, "psnr_vq {pq:.3}\nssim_vq {sq:.4}")?;
    if ae.has_continuous_decoder() {
        let (pc, sc) = reconstruction(&ae, &held, DecoderKind::Continuous)?;
        writeln!(report, "psnr_continuous {pc:.3}\nssim_continuous {sc:.4}")?;
    }

    let settings = MeasureSettings::from_config(&model.config.ablation);
    let data = TrainData::from_corpus(&held, &ae)?;
    let k = settings.eval_items.min(data.len());
    let sub = TrainData {
        features: data.features[..k].to_vec(),
        captions: data.captions[..k].to_vec(),
    };
    let l = evaluate(&model, &sub, seed, settings.eval_draws)?;
    writeln!(report, "heldout_ar {:.6}\nheldout_diff {:.6}\nheldout_total {:.6}", l.ar, l.diff, l.total)?;

    let n = prompts.min(data.len());
    let mut tsv = String::from("index\texpected\tgenerated\tvalid\tcorrect\n");
    let (mut valid, mut right) = (0, 0);
    for i in 0..n {
        let prompt = image_prompt(&data.features[i]);
        let cap = match generate(&model, &prompt, model.limits(), seed.wrapping_add(i as u64)) {
            Ok((seq, _)) => generated_caption(&seq, prompt.len()),
            Err(mixmodal_core::Error::BudgetExhausted { .. }) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let ok = ShapeSpec::parse_caption(&cap).is_ok();
        let correct = ok && cap == data.captions[i];
        valid += ok as usize;
        right += correct as usize;
        writeln!(
            tsv,
            "{i}\t{}\t{}\t{ok}\t{correct}",
            vocab::detokenize(&data.captions[i]),
            vocab::detokenize(&cap)
        )?;
    }
    let denom = n.max(1) as f64;
    writeln!(
        report,
        "caption_validity {:.4}\ncaption_accuracy {:.4}",
        valid as f64 / denom,
        right as f64 / denom
    )?;

    files::ensure_dir(&o.out)?;
    fs::write(files::in_out(o, "captions.tsv"), tsv)?;
    fs::write(files::in_out(o, "eval.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn ablate(o: &Options, kind: &str) -> Result<()> {
    let kind_v = AblationKind::from_name(kind).with_context(|| format!("unknown ablation {kind}"))?;
    let mut cfg = with_ablation_steps(files::load_config(o)?);
    if let Some(s) = o.steps {
        cfg.training.post.steps = s;
    }
    let ae = load_autoencoder(&input_checkpoint(o, files::AE_CKPT))?;
    let train = files::load_corpus(&train_corpus_path(o))?;
    let held = files::load_corpus(&files::in_out(o, files::HELD_OUT_CORPUS))?;
    let data = TrainData::from_corpus(&train, &ae)?;
    let settings = MeasureSettings::from_config(&cfg.ablation);
    let rep = run_ablation(kind_v, &cfg, &ae, &data, &held, &settings, cfg.seed)?;
    let mut table = rep.table();
    if kind_v == AblationKind::Embedding {
        let total = |n: &str| rep.variant(n).map(|v| v.held_out.total);
        if let (Some(s), Some(a), Some(l)) = (total("softmax"), total("argmin"), total("linear")) {
            writeln!(table, "# softmax<=argmin {}\tsoftmax<=linear {}", s <= a, s <= l)?;
        }
    }
    files::ensure_dir(&o.out)?;
    fs::write(files::in_out(o, &format!("ablation_{kind}.tsv")), &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(o: &Options, cases: usize) -> Result<()> {
    let seed = o.seed.unwrap_or(0);
    let mut rows: Vec<(String, usize, f64)> = kernel_suite(seed, cases, 16)?
        .into_iter()
        .map(|r| (r.kernel, r.cases, r.max_rel_error))
        .collect();
    rows.push((
        "diffusion_loss".into(),
        cases,
        mixmodal_core::heads::diffusion::loss_grad_check(seed, cases)?,
    ));
    println!("kernel\tcases\tmax_rel_error\tstatus");
    let mut failed = Vec::new();
    for (k, n, e) in &rows {
        let ok = *e < GRAD_TOLERANCE;
        println!("{k}\t{n}\t{e:.3e}\t{}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(k.as_str());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check above {GRAD_TOLERANCE:e} for {}", failed.join(","));
    }
    Ok(())
}
