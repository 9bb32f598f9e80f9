//! Interleaved decoding: greedy tokens in TEXT mode, sampled patches in
//! PATCH mode, with a forced `[EOI]` after every `n` patches.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use mixmodal_tensor::Scalar;

use crate::config::HeadKind;
use crate::error::{Error, Result};
use crate::heads::{self, ddim_sample, DiffusionHead};
use crate::model::Model;
use crate::rng::{stream_rng, Stream};
use crate::sequence::{image_blocks, Item, MixedSequence};
use crate::synth::{Autoencoder, DecoderKind, Image, PatchFeatures};
use crate::vocab::{self, TokenId, BOI, EOI, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Text,
    Patch,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Text => "TEXT",
            Mode::Patch => "PATCH",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmittedKind {
    Token(TokenId),
    /// Index of the patch within its image.
    Patch(usize),
    /// The appended `[EOI]`.
    ForcedEoi,
}

/// One decoding step: absolute position in the sequence, the mode the
/// step ran in, and what was emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceStep {
    pub position: usize,
    pub mode: Mode,
    pub kind: EmittedKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
    /// Patches already in the image the prompt left open, if any.
    pub open_at_start: Option<usize>,
}

impl GenerationTrace {
    /// Tab-separated: `step  mode  kind  token-or-patch-index`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tmode\tkind\tvalue\n");
        for (i, s) in self.steps.iter().enumerate() {
            let (kind, value) = match s.kind {
                EmittedKind::Token(t) => ("token", vocab::word(t)),
                EmittedKind::Patch(p) => ("patch", p.to_string()),
                EmittedKind::ForcedEoi => ("forced", vocab::word(EOI)),
            };
            out.push_str(&format!("{i}\t{}\t{kind}\t{value}\n", s.mode));
        }
        out
    }

    /// Protocol violations: a patch outside PATCH mode, an image that is
    /// not exactly `n` patches then a forced `[EOI]`, a model-emitted
    /// `[EOI]`, or positions that are not consecutive.
    pub fn violations(&self, n: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut in_image = self.open_at_start;
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 && s.position != self.steps[i - 1].position + 1 {
                out.push(format!("step {i}: position {} not consecutive", s.position));
            }
            match (s.kind, in_image) {
                (EmittedKind::Patch(_), None) => out.push(format!("step {i}: patch outside image")),
                (EmittedKind::Patch(p), Some(count)) => {
                    if s.mode != Mode::Patch {
                        out.push(format!("step {i}: patch emitted in {} mode", s.mode));
                    }
                    if p != count || count >= n {
                        out.push(format!("step {i}: patch index {p}, expected {count}"));
                    }
                    in_image = Some(count + 1);
                }
                (EmittedKind::ForcedEoi, Some(count)) => {
                    if count != n {
                        out.push(format!("step {i}: [EOI] after {count} patches"));
                    }
                    in_image = None;
                }
                (EmittedKind::ForcedEoi, None) => out.push(format!("step {i}: [EOI] without [BOI]")),
                (EmittedKind::Token(t), state) => {
                    if s.mode != Mode::Text {
                        out.push(format!("step {i}: token in {} mode", s.mode));
                    }
                    if t == EOI {
                        out.push(format!("step {i}: [EOI] chosen by the LM head"));
                    }
                    if state.is_some() {
                        out.push(format!("step {i}: token inside image"));
                    }
                    if t == BOI {
                        in_image = Some(0);
                    }
                }
            }
        }
        out
    }
}

/// What the decoder needs from a model.
pub trait DecodeModel<T> {
    /// Output state at the last position of `seq`.
    fn output_state(&self, seq: &MixedSequence<T>) -> Result<Vec<T>>;
    fn next_token(&self, state: &[T]) -> Result<TokenId>;
    fn sample_patch(&self, state: &[T], rng: &mut ChaCha8Rng) -> Result<Vec<T>>;
    fn patches_per_image(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Maximum number of items appended after the prompt.
    pub step_budget: usize,
    pub max_len: usize,
}

/// Decodes from `prompt`. A prompt ending inside an open image (for
/// example ending in `[BOI]`) starts in PATCH mode.
pub fn generate<T: Scalar, M: DecodeModel<T> + ?Sized>(
    model: &M,
    prompt: &MixedSequence<T>,
    limits: Limits,
    seed: u64,
) -> Result<(MixedSequence<T>, GenerationTrace)> {
    let n = model.patches_per_image();
    let mut rng = stream_rng(seed, Stream::Sample.id());
    let mut seq = prompt.clone();
    let mut trace = GenerationTrace::default();
    let (mut mode, mut count) = open_image_state(prompt, n)?;
    trace.open_at_start = (mode == Mode::Patch).then_some(count);
    let mut emitted = 0;
    loop {
        if mode == Mode::Patch && count == n {
            if emitted >= limits.step_budget || seq.len() >= limits.max_len {
                return Err(Error::BudgetExhausted {
                    budget: limits.step_budget,
                });
            }
            trace.steps.push(TraceStep {
                position: seq.len(),
                mode,
                kind: EmittedKind::ForcedEoi,
            });
            seq.push(Item::Token(EOI));
            emitted += 1;
            mode = Mode::Text;
            count = 0;
            continue;
        }
        if emitted >= limits.step_budget || seq.len() >= limits.max_len {
            if mode == Mode::Patch {
                return Err(Error::BudgetExhausted {
                    budget: limits.step_budget,
                });
            }
            break;
        }
        let state = model.output_state(&seq)?;
        let position = seq.len();
        match mode {
            Mode::Text => {
                let tok = model.next_token(&state)?;
                trace.steps.push(TraceStep {
                    position,
                    mode,
                    kind: EmittedKind::Token(tok),
                });
                seq.push(Item::Token(tok));
                emitted += 1;
                if tok == EOS {
                    break;
                }
                if tok == BOI {
                    mode = Mode::Patch;
                    count = 0;
                }
            }
            Mode::Patch => {
                let v = model.sample_patch(&state, &mut rng)?;
                trace.steps.push(TraceStep {
                    position,
                    mode,
                    kind: EmittedKind::Patch(count),
                });
                seq.push(Item::Patch(v));
                emitted += 1;
                count += 1;
            }
        }
    }
    Ok((seq, trace))
}

fn open_image_state<T: Clone>(prompt: &MixedSequence<T>, n: usize) -> Result<(Mode, usize)> {
    let mut open: Option<usize> = None;
    for (pos, item) in prompt.items().iter().enumerate() {
        match item {
            Item::Token(BOI) => open = Some(0),
            Item::Token(EOI) => open = None,
            Item::Patch(_) => match open.as_mut() {
                Some(c) if *c < n => *c += 1,
                _ => {
                    return Err(Error::MalformedSegment {
                        position: pos,
                        reason: "prompt patch outside an image".into(),
                    })
                }
            },
            Item::Token(_) => {}
        }
    }
    Ok(match open {
        Some(c) => (Mode::Patch, c),
        None => (Mode::Text, 0),
    })
}

/// Decodes every image segment of `seq` with the chosen decoder.
pub fn decode_image_segments<T: Scalar>(
    seq: &MixedSequence<T>,
    ae: &Autoencoder<T>,
    kind: DecoderKind,
) -> Result<Vec<Image>> {
    image_blocks(seq, crate::config::PATCHES_PER_IMAGE)?
        .into_iter()
        .map(|rows| {
            let d = rows[0].len();
            let t = mixmodal_tensor::Tensor::matrix(rows.len(), d, rows.concat());
            ae.decode(&PatchFeatures::new(t)?, kind)
        })
        .collect()
}

impl<T: Scalar> DecodeModel<T> for Model<T> {
    fn output_state(&self, seq: &MixedSequence<T>) -> Result<Vec<T>> {
        let f = self.output_states(seq)?;
        Ok(f.row(f.rows() - 1).to_vec())
    }

    /// Greedy over every token except `[EOI]`, which only the decoder
    /// appends after a full image.
    fn next_token(&self, state: &[T]) -> Result<TokenId> {
        let mut logits = heads::lm_logits(&self.params, state)?;
        logits[EOI] = T::neg_infinity();
        Ok(heads::greedy(&logits))
    }

    fn sample_patch(&self, state: &[T], rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
        match self.config.heads.kind {
            HeadKind::Diffusion => {
                let head = DiffusionHead {
                    store: &self.params,
                    cfg: &self.config.heads,
                };
                ddim_sample(&head, state, self.patch_dim(), self.schedule(), self.config.heads.cfg_scale, rng)
            }
            HeadKind::Mse => heads::mse::mse_head_predict(&self.params, state),
        }
    }

    fn patches_per_image(&self) -> usize {
        crate::config::PATCHES_PER_IMAGE
    }
}

impl<T: Scalar> Model<T> {
    pub fn limits(&self) -> Limits {
        Limits {
            step_budget: self.config.decode.step_budget,
            max_len: self.config.backbone.max_len,
        }
    }
}
