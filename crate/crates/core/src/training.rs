//! Losses, the two training stages and held-out evaluation.

use std::time::Instant;

use rand::Rng;

use mixmodal_tensor::{AdamW, AdamWConfig, NodeId, Scalar, Tensor};

use crate::backbone;
use crate::config::{HeadKind, StageParams};
use crate::error::{Error, Result};
use crate::heads::{self, DiffusionDraw};
use crate::model::{groups, Model};
use crate::nn::{apply_gradients, Ctx};
use crate::rng::{RngState, RngStreams, Stream};
use crate::sequence::{assemble, targets, Layout, MixedSequence, Segment};
use crate::synth::{Autoencoder, CorpusItem, PatchFeatures};
use crate::vocab::{TokenId, EOS};

/// Mean cross-entropy of `logits` rows against `targets` over `mask`.
pub fn ar_loss<T: Scalar>(logits: &Tensor<T>, targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    let mut g = mixmodal_tensor::Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets.to_vec(), mask.to_vec())?;
    Ok(g.value(ce).item().as_f64())
}

/// `ar + λ·diff`.
pub fn combined_loss(ar: f64, diff: f64, lambda: f64) -> f64 {
    ar + lambda * diff
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Image-only sequences; only the vision embedding and patch head move.
    Base,
    /// Mixed layouts; everything except the autoencoder moves.
    Post,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Base => "base",
            StageKind::Post => "post",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "base" => Some(StageKind::Base),
            "post" => Some(StageKind::Post),
            _ => None,
        }
    }

    pub fn trains(self, group: &str, head: HeadKind) -> bool {
        let patch_head = match head {
            HeadKind::Diffusion => groups::DIFF_HEAD,
            HeadKind::Mse => groups::MSE_HEAD,
        };
        match self {
            StageKind::Base => group == groups::VISION_EMBED || group == patch_head,
            StageKind::Post => group != groups::AUTOENCODER,
        }
    }
}

/// Patch features and captions of a corpus, encoded once.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub features: Vec<PatchFeatures<T>>,
    pub captions: Vec<Vec<TokenId>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_corpus(corpus: &[CorpusItem], ae: &Autoencoder<T>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("empty corpus".into()));
        }
        let features = corpus.iter().map(|c| ae.encode(&c.image)).collect::<Result<Vec<_>>>()?;
        let captions = corpus.iter().map(|c| c.caption.clone()).collect();
        Ok(Self { features, captions })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn with_eos(caption: &[TokenId]) -> Vec<TokenId> {
    let mut c = caption.to_vec();
    c.push(EOS);
    c
}

/// `[BOI] v_1 … v_n [EOI]`, all model output.
pub fn base_sequence<T: Scalar>(f: &PatchFeatures<T>, max_len: usize) -> Result<MixedSequence<T>> {
    assemble(
        &Layout {
            user: vec![],
            model: vec![Segment::Image(f.clone())],
        },
        max_len,
    )
}

/// `caption [SEP] [BOI] v_1 … v_n [EOI] [EOS]`
pub fn caption_to_image<T: Scalar>(caption: &[TokenId], f: &PatchFeatures<T>, max_len: usize) -> Result<MixedSequence<T>> {
    assemble(
        &Layout {
            user: vec![Segment::Text(caption.to_vec())],
            model: vec![Segment::Image(f.clone()), Segment::Text(vec![EOS])],
        },
        max_len,
    )
}

/// `[BOI] v_1 … v_n [EOI] [SEP] caption [EOS]`
pub fn image_to_caption<T: Scalar>(f: &PatchFeatures<T>, caption: &[TokenId], max_len: usize) -> Result<MixedSequence<T>> {
    assemble(
        &Layout {
            user: vec![Segment::Image(f.clone())],
            model: vec![Segment::Text(with_eos(caption))],
        },
        max_len,
    )
}

/// A batch of sequences with their targets in stacked-row coordinates.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub seqs: Vec<MixedSequence<T>>,
    pub text_rows: Vec<usize>,
    pub text_targets: Vec<TokenId>,
    pub patch_rows: Vec<usize>,
    /// `patch_rows.len() × d_v`, or `None` when there are no patch targets.
    pub patch_targets: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(seqs: Vec<MixedSequence<T>>, d_v: usize) -> Self {
        let mut text_rows = Vec::new();
        let mut text_targets = Vec::new();
        let mut patch_rows = Vec::new();
        let mut patch_data = Vec::new();
        let mut offset = 0;
        for s in &seqs {
            let t = targets(s);
            for (pos, tok) in t.text {
                text_rows.push(offset + pos);
                text_targets.push(tok);
            }
            for (pos, v) in t.patch {
                patch_rows.push(offset + pos);
                patch_data.extend(v);
            }
            offset += s.len();
        }
        let patch_targets = (!patch_rows.is_empty()).then(|| Tensor::matrix(patch_rows.len(), d_v, patch_data));
        Self {
            seqs,
            text_rows,
            text_targets,
            patch_rows,
            patch_targets,
        }
    }
}

/// Which loss terms to build and how to weigh them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ar: bool,
    pub diff: bool,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub ar: Option<f64>,
    pub diff: Option<f64>,
    pub total: f64,
}

pub struct LossNodes {
    pub ar: Option<NodeId>,
    pub diff: Option<NodeId>,
    pub total: NodeId,
}

/// Routes text targets to the LM head and patch targets to the patch head.
pub fn batch_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    model: &Model<T>,
    batch: &Batch<T>,
    draw: Option<&DiffusionDraw<T>>,
    weights: LossWeights,
) -> Result<LossNodes> {
    let refs: Vec<&MixedSequence<T>> = batch.seqs.iter().collect();
    let (x, spans) = model.embed_batch(ctx, &refs)?;
    let f = backbone::forward_states(ctx, x, &spans, &model.config.backbone)?;
    let ar = if weights.ar && !batch.text_rows.is_empty() {
        let rows = ctx.g.gather(f, batch.text_rows.clone())?;
        let logits = heads::lm::logits_node(ctx, rows)?;
        let n = batch.text_targets.len();
        Some(ctx.g.cross_entropy(logits, batch.text_targets.clone(), vec![true; n])?)
    } else {
        None
    };
    let diff = match (&batch.patch_targets, weights.diff) {
        (Some(target), true) => {
            let rows = ctx.g.gather(f, batch.patch_rows.clone())?;
            Some(match model.config.heads.kind {
                HeadKind::Diffusion => {
                    let draw = draw.ok_or_else(|| Error::Config("diffusion loss needs a noise draw".into()))?;
                    heads::diffusion::loss_node(ctx, rows, target, draw, model.schedule(), &model.config.heads)?
                }
                HeadKind::Mse => heads::mse::loss_node(ctx, rows, target)?,
            })
        }
        _ => None,
    };
    let total = match (ar, diff) {
        (Some(a), Some(d)) => {
            let wd = ctx.g.scale(d, weights.lambda)?;
            ctx.g.add(a, wd)?
        }
        (Some(a), None) => a,
        (None, Some(d)) => d,
        // e.g. an all image→caption batch with the AR term switched off
        (None, None) => ctx.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossNodes { ar, diff, total })
}

fn read_losses<T: Scalar>(ctx: &Ctx<'_, T>, nodes: &LossNodes) -> StepLosses {
    let v = |id: NodeId| ctx.value(id).item().as_f64();
    StepLosses {
        ar: nodes.ar.map(v),
        diff: nodes.diff.map(v),
        total: v(nodes.total),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: StageKind,
    pub losses: Vec<StepLosses>,
    pub wall_clock_secs: f64,
    /// Hex SHA-256 of all parameters after the last step.
    pub checkpoint_id: String,
}

impl TrainReport {
    pub fn ar_curve(&self) -> Vec<f64> {
        self.losses.iter().filter_map(|l| l.ar).collect()
    }

    pub fn diff_curve(&self) -> Vec<f64> {
        self.losses.iter().filter_map(|l| l.diff).collect()
    }

    pub fn total_curve(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l.total).collect()
    }
}

/// Means of the first and last `window` values.
pub fn smoothed_ends(curve: &[f64], window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() {
        return None;
    }
    let w = window.clamp(1, curve.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Optimizer, randomness and step counter of one stage over a model.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub stage: StageKind,
    pub opt: AdamW<T>,
    pub rngs: RngStreams,
    pub step: usize,
    pub weights: LossWeights,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, stage: StageKind, seed: u64) -> Self {
        let params = stage_params(&model, stage).clone();
        let t = &model.config.training;
        let opt = AdamW::new(AdamWConfig {
            lr: params.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        });
        let weights = LossWeights {
            ar: t.ar_loss,
            diff: t.diff_loss,
            lambda: t.lambda,
        };
        let head = model.config.heads.kind;
        model.params.set_trainable(|g| stage.trains(g, head));
        Self {
            model,
            stage,
            opt,
            rngs: RngStreams::new(seed),
            step: 0,
            weights,
        }
    }

    /// Continues from saved optimizer and RNG state.
    pub fn resume(model: Model<T>, stage: StageKind, opt: AdamW<T>, rng: &RngState, step: usize) -> Self {
        let mut t = Self::new(model, stage, rng.seed);
        t.opt = opt;
        t.rngs = RngStreams::from_state(rng);
        t.step = step;
        t
    }

    pub fn sample_batch(&mut self, data: &TrainData<T>) -> Result<Batch<T>> {
        let cfg = &self.model.config;
        let batch = stage_params(&self.model, self.stage).batch;
        let max_len = cfg.backbone.max_len;
        let frac = cfg.training.caption_to_image_fraction;
        let mut seqs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let rng = self.rngs.get(Stream::Data);
            let i = rng.random_range(0..data.len());
            let seq = match self.stage {
                StageKind::Base => base_sequence(&data.features[i], max_len)?,
                StageKind::Post => {
                    if rng.random::<f64>() < frac {
                        caption_to_image(&data.captions[i], &data.features[i], max_len)?
                    } else {
                        image_to_caption(&data.features[i], &data.captions[i], max_len)?
                    }
                }
            };
            seqs.push(seq);
        }
        Ok(Batch::new(seqs, self.model.patch_dim()))
    }

    /// One optimizer step. Aborts without touching parameters when the
    /// loss is not finite.
    pub fn train_step(&mut self, data: &TrainData<T>) -> Result<StepLosses> {
        let batch = self.sample_batch(data)?;
        let h = &self.model.config.heads;
        let draw = (!batch.patch_rows.is_empty()).then(|| {
            DiffusionDraw::sample(
                batch.patch_rows.len(),
                self.model.patch_dim(),
                h.train_steps,
                h.cond_dropout,
                &mut self.rngs,
            )
        });
        let (losses, grads) = {
            let mut ctx = Ctx::new(&self.model.params, true);
            let nodes = batch_loss(&mut ctx, &self.model, &batch, draw.as_ref(), self.weights)?;
            let losses = read_losses(&ctx, &nodes);
            let (_, grads) = ctx.gradients(nodes.total)?;
            (losses, grads)
        };
        if !losses.total.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                what: format!("{} loss is {}", self.stage.name(), losses.total),
            });
        }
        apply_gradients(&mut self.model.params, &mut self.opt, &grads).map_err(|e| Error::Divergence {
            step: self.step,
            what: e.to_string(),
        })?;
        self.step += 1;
        Ok(losses)
    }

    /// Runs `steps` steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &TrainData<T>,
        steps: usize,
        mut on_step: impl FnMut(usize, &StepLosses),
    ) -> Result<TrainReport> {
        let start = Instant::now();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let l = self.train_step(data)?;
            on_step(self.step, &l);
            losses.push(l);
        }
        Ok(TrainReport {
            stage: self.stage,
            losses,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checkpoint_id: hex(&self.model.params.digest(|_| true)),
        })
    }
}

pub fn stage_params<T>(model: &Model<T>, stage: StageKind) -> &StageParams {
    match stage {
        StageKind::Base => &model.config.training.base,
        StageKind::Post => &model.config.training.post,
    }
}

/// Trains the base stage for the configured number of steps.
pub fn train_base<T: Scalar>(model: Model<T>, data: &TrainData<T>, seed: u64) -> Result<(Model<T>, TrainReport)> {
    let steps = model.config.training.base.steps;
    let mut t = Trainer::new(model, StageKind::Base, seed);
    let report = t.run(data, steps, |_, _| {})?;
    Ok((t.model, report))
}

/// Trains the post stage for the configured number of steps.
pub fn post_train<T: Scalar>(model: Model<T>, data: &TrainData<T>, seed: u64) -> Result<(Model<T>, TrainReport)> {
    let steps = model.config.training.post.steps;
    let mut t = Trainer::new(model, StageKind::Post, seed);
    let report = t.run(data, steps, |_, _| {})?;
    Ok((t.model, report))
}

/// Held-out losses over both post-training layouts of every item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLosses {
    pub ar: f64,
    pub diff: f64,
    pub total: f64,
}

/// Deterministic held-out evaluation: fixed noise from `seed`, no
/// condition dropout, `draws` noise samples per patch.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &TrainData<T>, seed: u64, draws: usize) -> Result<EvalLosses> {
    let max_len = model.config.backbone.max_len;
    let mut rngs = RngStreams::new(seed);
    let (mut ar_sum, mut ar_n, mut diff_sum, mut diff_n) = (0.0, 0usize, 0.0, 0usize);
    let weights = LossWeights {
        ar: true,
        diff: true,
        lambda: model.config.training.lambda,
    };
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(16) {
        let mut text_seqs = Vec::new();
        let mut image_seqs = Vec::new();
        for &i in chunk {
            image_seqs.push(caption_to_image(&data.captions[i], &data.features[i], max_len)?);
            text_seqs.push(image_to_caption(&data.features[i], &data.captions[i], max_len)?);
        }
        let tb = Batch::new(text_seqs, model.patch_dim());
        let mut ctx = Ctx::new(&model.params, false);
        let nodes = batch_loss(
            &mut ctx,
            model,
            &tb,
            None,
            LossWeights {
                diff: false,
                ..weights
            },
        )?;
        ar_sum += read_losses(&ctx, &nodes).ar.unwrap_or(0.0) * tb.text_rows.len() as f64;
        ar_n += tb.text_rows.len();

        let ib = Batch::new(image_seqs, model.patch_dim());
        for _ in 0..draws.max(1) {
            let h = &model.config.heads;
            let draw = DiffusionDraw::sample(ib.patch_rows.len(), model.patch_dim(), h.train_steps, 0.0, &mut rngs);
            let mut ctx = Ctx::new(&model.params, false);
            let nodes = batch_loss(&mut ctx, model, &ib, Some(&draw), weights)?;
            let l = read_losses(&ctx, &nodes);
            ar_sum += l.ar.unwrap_or(0.0) * ib.text_rows.len() as f64 / draws.max(1) as f64;
            diff_sum += l.diff.unwrap_or(0.0) * ib.patch_rows.len() as f64;
            diff_n += ib.patch_rows.len();
        }
        ar_n += ib.text_rows.len();
    }
    let ar = ar_sum / ar_n.max(1) as f64;
    let diff = diff_sum / diff_n.max(1) as f64;
    Ok(EvalLosses {
        ar,
        diff,
        total: combined_loss(ar, diff, model.config.training.lambda),
    })
}

/// One metrics-log line: `step ar diff total`, with `-` for absent terms.
pub fn metrics_line(step: usize, l: &StepLosses) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    format!("{step} {} {} {:.6}", f(l.ar), f(l.diff), l.total)
}

/// JSON-lines variant of [`metrics_line`]; absent terms are `null`.
pub fn metrics_json(step: usize, l: &StepLosses) -> String {
    #[derive(serde::Serialize)]
    struct Line {
        step: usize,
        ar: Option<f64>,
        diff: Option<f64>,
        total: f64,
    }
    serde_json::to_string(&Line {
        step,
        ar: l.ar,
        diff: l.diff,
        total: l.total,
    })
    .expect("plain numbers serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_arithmetic() {
        assert!((combined_loss(2.0, 0.03, 100.0) - 5.0).abs() < 1e-12);
        assert_eq!(combined_loss(1.5, 7.0, 0.0), 1.5);
    }

    #[test]
    fn smoothing_windows() {
        let c: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(smoothed_ends(&c, 2), Some((0.5, 8.5)));
        assert_eq!(smoothed_ends(&[], 2), None);
    }

    #[test]
    fn stage_groups() {
        assert!(StageKind::Base.trains(groups::VISION_EMBED, HeadKind::Diffusion));
        assert!(StageKind::Base.trains(groups::DIFF_HEAD, HeadKind::Diffusion));
        assert!(!StageKind::Base.trains(groups::BACKBONE, HeadKind::Diffusion));
        assert!(!StageKind::Base.trains(groups::DIFF_HEAD, HeadKind::Mse));
        assert!(StageKind::Post.trains(groups::LM_HEAD, HeadKind::Diffusion));
        assert!(!StageKind::Post.trains(groups::AUTOENCODER, HeadKind::Diffusion));
    }

    #[test]
    fn metrics_formats() {
        let l = StepLosses {
            ar: None,
            diff: Some(0.5),
            total: 0.5,
        };
        assert_eq!(metrics_line(3, &l), "3 - 0.500000 0.500000");
        assert_eq!(metrics_json(3, &l), "{\"step\":3,\"ar\":null,\"diff\":0.5,\"total\":0.5}");
    }
}
