//! The full unified model: parameter layout, initialization, batched
//! input embedding and single-sequence inference helpers.

use std::ops::Range;

use mixmodal_tensor::{NodeId, ParamStore, Scalar, Tensor};

use crate::backbone;
use crate::config::{Config, EmbeddingKind, HeadKind};
use crate::embedding::{self, hard_embed, linear_embed, soft_embed, text_embed, Codebook};
use crate::error::{Error, Result};
use crate::heads::{self, DiffusionSchedule};
use crate::nn::{gaussian_tensor, Ctx};
use crate::rng::{stream_rng, Stream};
use crate::sequence::{Item, MixedSequence};
use crate::synth::autoencoder::{self, Autoencoder};

pub mod groups {
    pub const TEXT_EMBED: &str = "text_embed";
    pub const VISION_EMBED: &str = "vision_embed";
    pub const BACKBONE: &str = crate::backbone::GROUP;
    pub const LM_HEAD: &str = crate::heads::lm::GROUP;
    pub const DIFF_HEAD: &str = crate::heads::diffusion::GROUP;
    pub const MSE_HEAD: &str = crate::heads::mse::GROUP;
    pub const AUTOENCODER: &str = crate::synth::autoencoder::GROUP;
}

pub const TEXT_TABLE: &str = "text.embed";
pub const VIS_CODES: &str = "vis.codes";
pub const VIS_WEIGHTS: &str = "vis.w";
pub const VIS_LINEAR: &str = "vis.linear";

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: Config,
    pub params: ParamStore<T>,
    schedule: DiffusionSchedule,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters for every group except the autoencoder, which is
    /// copied from `ae`. Codes start from the autoencoder's codebook.
    pub fn init(config: Config, ae: &Autoencoder<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init.id());
        let mut params = ParamStore::new();
        let (b, d_e) = (&config.backbone, config.backbone.width);
        let d_v = ae.patch_dim();
        if d_v != config.autoencoder.patch_dim {
            return Err(Error::Config(format!(
                "autoencoder features have {d_v} dims but config says {}",
                config.autoencoder.patch_dim
            )));
        }
        let std = config.embedding.init_std;
        params.insert(TEXT_TABLE, groups::TEXT_EMBED, gaussian_tensor(&mut rng, &[b.vocab_size, d_e], b.init_std));
        match config.embedding.kind {
            EmbeddingKind::Softmax | EmbeddingKind::Argmin => {
                let codes = ae.codebook().clone();
                let k = codes.rows();
                params.insert(VIS_CODES, groups::VISION_EMBED, codes);
                params.insert(VIS_WEIGHTS, groups::VISION_EMBED, gaussian_tensor(&mut rng, &[k, d_e], std));
            }
            EmbeddingKind::Linear => {
                params.insert(VIS_LINEAR, groups::VISION_EMBED, gaussian_tensor(&mut rng, &[d_e, d_v], std));
            }
        }
        backbone::init(&mut params, b, &mut rng);
        heads::lm::init(&mut params, b.vocab_size, d_e, b.init_std, &mut rng);
        match config.heads.kind {
            HeadKind::Diffusion => heads::diffusion::init(&mut params, &config.heads, d_e, d_v, &mut rng),
            HeadKind::Mse => heads::mse::init(&mut params, config.heads.width, d_e, d_v, &mut rng),
        }
        for (name, p) in ae.params.iter() {
            params.insert(name, groups::AUTOENCODER, p.tensor.clone());
        }
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: Config, params: ParamStore<T>) -> Result<Self> {
        let h = &config.heads;
        let schedule = DiffusionSchedule::new(h.train_steps, h.beta_start, h.beta_end, h.ddim_steps)?;
        Ok(Self {
            config,
            params,
            schedule,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn patch_dim(&self) -> usize {
        self.config.autoencoder.patch_dim
    }

    pub fn width(&self) -> usize {
        self.config.backbone.width
    }

    pub fn autoencoder(&self) -> Result<Autoencoder<T>> {
        Autoencoder::from_store(&self.params)
    }

    pub fn codebook(&self) -> Result<Codebook<T>> {
        let codes = self.tensor(VIS_CODES)?.clone();
        let w = self.tensor(VIS_WEIGHTS)?.clone();
        Codebook::new(codes, w, self.config.embedding.temperature)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.tensor(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Input vectors of one patch per row of `v` under the configured
    /// embedding kind.
    pub fn embed_patches(&self, ctx: &mut Ctx<'_, T>, v: NodeId) -> Result<NodeId> {
        match self.config.embedding.kind {
            EmbeddingKind::Softmax => {
                let c = ctx.p(VIS_CODES)?;
                let w = ctx.p(VIS_WEIGHTS)?;
                soft_embed(&mut ctx.g, v, c, w, self.config.embedding.temperature)
            }
            EmbeddingKind::Argmin => {
                let w = ctx.p(VIS_WEIGHTS)?;
                let vals = ctx.value(v).clone();
                hard_embed(&mut ctx.g, &vals, self.tensor(VIS_CODES)?, w)
            }
            EmbeddingKind::Linear => {
                let w = ctx.p(VIS_LINEAR)?;
                linear_embed(&mut ctx.g, v, w)
            }
        }
    }

    /// Stacks the embedded inputs of several sequences (`N × d_e`) and
    /// returns each sequence's row range.
    pub fn embed_batch(&self, ctx: &mut Ctx<'_, T>, seqs: &[&MixedSequence<T>]) -> Result<(NodeId, Vec<Range<usize>>)> {
        let d_v = self.patch_dim();
        let mut tokens = Vec::new();
        let mut patches = Vec::new();
        let mut source = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        let mut row = 0;
        for seq in seqs {
            if seq.len() > self.config.backbone.max_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: self.config.backbone.max_len,
                });
            }
            if seq.is_empty() {
                return Err(Error::Format("empty sequence".into()));
            }
            for item in seq.items() {
                match item {
                    Item::Token(t) => {
                        source.push((false, tokens.len()));
                        tokens.push(*t);
                    }
                    Item::Patch(v) => {
                        if v.len() != d_v {
                            return Err(Error::Format(format!("patch has {} dims, expected {d_v}", v.len())));
                        }
                        source.push((true, patches.len() / d_v));
                        patches.extend_from_slice(v);
                    }
                }
            }
            spans.push(row..row + seq.len());
            row += seq.len();
        }
        let n_tok = tokens.len();
        let mut parts = Vec::new();
        if n_tok > 0 {
            let table = ctx.p(TEXT_TABLE)?;
            parts.push(text_embed(&mut ctx.g, table, &tokens)?);
        }
        if !patches.is_empty() {
            let v = ctx.constant(Tensor::matrix(patches.len() / d_v, d_v, patches));
            parts.push(self.embed_patches(ctx, v)?);
        }
        let stacked = ctx.g.concat(&parts, 0)?;
        let order: Vec<usize> = source
            .iter()
            .map(|&(is_patch, i)| if is_patch { n_tok + i } else { i })
            .collect();
        let identity = order.iter().enumerate().all(|(k, &i)| k == i);
        let x = if identity { stacked } else { ctx.g.gather(stacked, order)? };
        Ok((x, spans))
    }

    /// Output states of one sequence, no gradient tracking.
    pub fn output_states(&self, seq: &MixedSequence<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.params, false);
        let (x, spans) = self.embed_batch(&mut ctx, &[seq])?;
        let f = backbone::forward_states(&mut ctx, x, &spans, &self.config.backbone)?;
        Ok(ctx.value(f).clone())
    }

    /// Embedded inputs of one sequence with per-position modality tags.
    pub fn embed_sequence(&self, seq: &MixedSequence<T>) -> Result<EmbeddedSequence<T>> {
        let mut ctx = Ctx::new(&self.params, false);
        let (x, _) = self.embed_batch(&mut ctx, &[seq])?;
        Ok(EmbeddedSequence {
            vectors: ctx.value(x).clone(),
            tags: seq.tags(),
        })
    }

    /// Images are decoded with the continuous decoder when one exists.
    pub fn decode_images(&self, seq: &MixedSequence<T>) -> Result<Vec<crate::synth::Image>> {
        let ae = self.autoencoder()?;
        let kind = if ae.has_continuous_decoder() {
            autoencoder::DecoderKind::Continuous
        } else {
            autoencoder::DecoderKind::Quantized
        };
        crate::decode::decode_image_segments(seq, &ae, kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence<T> {
    pub vectors: Tensor<T>,
    pub tags: Vec<crate::sequence::Modality>,
}

/// Convenience for tests and tools: the single-patch embedding under a
/// model's configured kind.
pub fn embed_patch<T: Scalar>(model: &Model<T>, v: &[T]) -> Result<Vec<T>> {
    match model.config.embedding.kind {
        EmbeddingKind::Softmax => model.codebook()?.embed_soft(v),
        EmbeddingKind::Argmin => {
            let cb = model.codebook()?;
            cb.embed_hard(cb.quantize(v)?)
        }
        EmbeddingKind::Linear => embedding::embed_linear(v, model.tensor(VIS_LINEAR)?),
    }
}
