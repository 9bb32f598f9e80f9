//! Mixed text/patch sequences and their training targets.

use crate::error::{Error, Result};
use crate::synth::PatchFeatures;
use crate::vocab::{self, TokenId, BOI, EOI, SEP};

/// One position of a mixed sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Item<T> {
    Token(TokenId),
    Patch(Vec<T>),
}

impl<T> Item<T> {
    pub fn token(&self) -> Option<TokenId> {
        match self {
            Item::Token(t) => Some(*t),
            Item::Patch(_) => None,
        }
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, Item::Patch(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Patch,
    Special,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment<T> {
    Text(Vec<TokenId>),
    Image(PatchFeatures<T>),
}

/// Segments before and after the user/model boundary. `[SEP]` separates
/// the two halves when both are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout<T> {
    pub user: Vec<Segment<T>>,
    pub model: Vec<Segment<T>>,
}

impl<T> Layout<T> {
    pub fn user_only(user: Vec<Segment<T>>) -> Self {
        Self { user, model: Vec::new() }
    }
}

/// Ordered items plus the index of the first model-output position
/// (equal to `len()` when the sequence is all prompt).
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence<T> {
    items: Vec<Item<T>>,
    model_start: usize,
}

impl<T: Clone> MixedSequence<T> {
    pub fn new(items: Vec<Item<T>>, model_start: usize) -> Self {
        let model_start = model_start.min(items.len());
        Self { items, model_start }
    }

    /// A prompt: every position is user input.
    pub fn prompt(items: Vec<Item<T>>) -> Self {
        let n = items.len();
        Self::new(items, n)
    }

    pub fn items(&self) -> &[Item<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn model_start(&self) -> usize {
        self.model_start
    }

    pub fn push(&mut self, item: Item<T>) {
        self.items.push(item);
    }

    pub fn last(&self) -> Option<&Item<T>> {
        self.items.last()
    }

    pub fn tags(&self) -> Vec<Modality> {
        self.items
            .iter()
            .map(|it| match it {
                Item::Patch(_) => Modality::Patch,
                Item::Token(t) if vocab::is_special(*t) => Modality::Special,
                Item::Token(_) => Modality::Text,
            })
            .collect()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.items.iter().filter_map(Item::token).collect()
    }

    pub fn patch_count(&self) -> usize {
        self.items.iter().filter(|it| it.is_patch()).count()
    }

    /// Items after `start`, as owned values.
    pub fn tail(&self, start: usize) -> Vec<Item<T>> {
        self.items[start.min(self.items.len())..].to_vec()
    }
}

fn push_segment<T: mixmodal_tensor::Scalar>(items: &mut Vec<Item<T>>, seg: &Segment<T>) {
    match seg {
        Segment::Text(ids) => items.extend(ids.iter().map(|&t| Item::Token(t))),
        Segment::Image(f) => {
            items.push(Item::Token(BOI));
            items.extend(f.rows().into_iter().map(Item::Patch));
            items.push(Item::Token(EOI));
        }
    }
}

/// Flattens a layout into positions `0..len`.
pub fn assemble<T: mixmodal_tensor::Scalar>(layout: &Layout<T>, max_len: usize) -> Result<MixedSequence<T>> {
    let mut items = Vec::new();
    for seg in &layout.user {
        push_segment(&mut items, seg);
    }
    if !layout.user.is_empty() && !layout.model.is_empty() {
        items.push(Item::Token(SEP));
    }
    let model_start = items.len();
    for seg in &layout.model {
        push_segment(&mut items, seg);
    }
    if items.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: items.len(),
            max: max_len,
        });
    }
    Ok(MixedSequence::new(items, model_start))
}

/// Next-item targets of one sequence. Position `i` is the output state
/// that predicts item `i + 1`. Only model-output items are targets, and
/// `[EOI]` is never one because decoding appends it unconditionally.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets<T> {
    /// `(position, token)` pairs routed to the LM head.
    pub text: Vec<(usize, TokenId)>,
    /// `(position, clean patch)` pairs routed to the patch head.
    pub patch: Vec<(usize, Vec<T>)>,
}

pub fn targets<T: Clone>(seq: &MixedSequence<T>) -> Targets<T> {
    let mut out = Targets {
        text: Vec::new(),
        patch: Vec::new(),
    };
    for next in seq.model_start.max(1)..seq.items.len() {
        match &seq.items[next] {
            Item::Token(EOI) => {}
            Item::Token(t) => out.text.push((next - 1, *t)),
            Item::Patch(v) => out.patch.push((next - 1, v.clone())),
        }
    }
    out
}

/// Scans for image segments and returns the patch blocks. Every `[BOI]`
/// must be followed by exactly `n` patches and an `[EOI]`; patches outside
/// a segment and stray `[EOI]`s are errors.
pub fn image_blocks<T: Clone>(seq: &MixedSequence<T>, n: usize) -> Result<Vec<Vec<Vec<T>>>> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, Vec<Vec<T>>)> = None;
    for (pos, item) in seq.items.iter().enumerate() {
        let malformed = |reason: &str| Error::MalformedSegment {
            position: pos,
            reason: reason.into(),
        };
        match (item, &mut open) {
            (Item::Token(BOI), None) => open = Some((pos, Vec::new())),
            (Item::Token(BOI), Some(_)) => return Err(malformed("nested [BOI]")),
            (Item::Token(EOI), None) => return Err(malformed("[EOI] without [BOI]")),
            (Item::Token(EOI), Some((_, patches))) => {
                if patches.len() != n {
                    return Err(malformed(&format!("{} patches in image, expected {n}", patches.len())));
                }
                blocks.push(std::mem::take(patches));
                open = None;
            }
            (Item::Token(_), Some(_)) => return Err(malformed("text token inside image")),
            (Item::Token(_), None) => {}
            (Item::Patch(_), None) => return Err(malformed("patch outside image")),
            (Item::Patch(v), Some((_, patches))) => {
                if patches.len() == n {
                    return Err(malformed(&format!("more than {n} patches in image")));
                }
                patches.push(v.clone());
            }
        }
    }
    if let Some((start, _)) = open {
        return Err(Error::MalformedSegment {
            position: start,
            reason: "[BOI] never closed".into(),
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixmodal_tensor::Tensor;

    fn image() -> PatchFeatures<f32> {
        PatchFeatures::new(Tensor::from_fn(&[16, 8], |i| i as f32)).unwrap()
    }

    #[test]
    fn text_then_image_counts() {
        let l = Layout::user_only(vec![Segment::Text(vec![5, 6, 7, 8, 9]), Segment::Image(image())]);
        let s = assemble(&l, 64).unwrap();
        assert_eq!(s.len(), 23);
        let l = Layout::user_only(vec![Segment::<f32>::Text(vec![5, 6])]);
        let s = assemble(&l, 64).unwrap();
        assert!(!s.tokens().contains(&BOI) && !s.tokens().contains(&EOI));
    }

    #[test]
    fn too_long_is_rejected() {
        let l = Layout::user_only(vec![Segment::Image(image()), Segment::Image(image())]);
        assert!(matches!(assemble(&l, 30), Err(Error::SequenceTooLong { len: 36, max: 30 })));
    }

    #[test]
    fn caption_to_image_targets() {
        let cap = vec![5, 7, 10, 11, 6, 15];
        let l = Layout {
            user: vec![Segment::Text(cap)],
            model: vec![Segment::Image(image()), Segment::Text(vec![vocab::EOS])],
        };
        let s = assemble(&l, 64).unwrap();
        assert_eq!(s.len(), 26);
        assert_eq!(s.model_start(), 7);
        let t = targets(&s);
        assert_eq!(t.text, vec![(6, BOI), (24, vocab::EOS)]);
        assert_eq!(t.patch.len(), 16);
        assert_eq!(t.patch[0].0, 7);
        assert_eq!(t.patch[15].0, 22);
    }

    #[test]
    fn image_to_caption_targets() {
        let cap = vec![5, 7, 10, 11, 6, 15, vocab::EOS];
        let l = Layout {
            user: vec![Segment::Image(image())],
            model: vec![Segment::Text(cap.clone())],
        };
        let s = assemble(&l, 64).unwrap();
        let t = targets(&s);
        assert!(t.patch.is_empty());
        let want: Vec<(usize, TokenId)> = cap.iter().enumerate().map(|(i, &c)| (18 + i, c)).collect();
        assert_eq!(t.text, want);
    }

    #[test]
    fn scanner_rejects_bad_nesting() {
        let ok = assemble(
            &Layout::user_only(vec![Segment::Image(image()), Segment::Text(vec![5]), Segment::Image(image())]),
            64,
        )
        .unwrap();
        assert_eq!(image_blocks(&ok, 16).unwrap().len(), 2);
        let mut items = ok.items().to_vec();
        items.remove(3);
        let bad = MixedSequence::prompt(items);
        assert!(matches!(image_blocks(&bad, 16), Err(Error::MalformedSegment { position: 16, .. })));
        let stray = MixedSequence::<f32>::prompt(vec![Item::Token(EOI)]);
        assert!(matches!(image_blocks(&stray, 16), Err(Error::MalformedSegment { position: 0, .. })));
    }
}
