use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::rng::{normal, stream_rng, Stream};
use crate::synth::shapes::{render_shifted, Image, ShapeSpec, PIXELS};
use crate::vocab::TokenId;

pub const CORPUS_MAGIC: &[u8; 7] = b"ORTSYN1";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub spec: ShapeSpec,
    pub image: Image,
    pub caption: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    fn stream(self) -> Stream {
        match self {
            Split::Train => Stream::CorpusTrain,
            Split::HeldOut => Stream::CorpusHeldOut,
        }
    }
}

/// Generates `size` (image, caption) pairs. Training and held-out splits
/// draw specs and noise from disjoint streams of the same seed.
///
/// With `stratified`, every consecutive block of 64 items is a shuffled
/// permutation of all specs; otherwise specs are drawn uniformly.
pub fn make_corpus(seed: u64, size: usize, split: Split, cfg: &SynthConfig) -> Vec<CorpusItem> {
    let mut rng = stream_rng(seed, split.stream().id());
    let mut order: Vec<usize> = Vec::with_capacity(size);
    if cfg.stratified {
        while order.len() < size {
            let mut block: Vec<usize> = (0..ShapeSpec::COUNT).collect();
            block.shuffle(&mut rng);
            order.extend(block);
        }
        order.truncate(size);
    } else {
        order.extend((0..size).map(|_| rng.random_range(0..ShapeSpec::COUNT)));
    }
    order
        .into_iter()
        .map(|idx| {
            let spec = ShapeSpec::from_index(idx);
            let dx = rng.random_range(-cfg.jitter..=cfg.jitter);
            let dy = rng.random_range(-cfg.jitter..=cfg.jitter);
            let clean = render_shifted(&spec, dx, dy);
            let pixels = clean
                .pixels()
                .iter()
                .map(|&p| p + (cfg.pixel_noise * normal::<f64>(&mut rng)) as f32)
                .collect();
            CorpusItem {
                spec,
                image: Image::new(pixels).expect("fixed size"),
                caption: spec.caption(),
            }
        })
        .collect()
}

pub fn write_corpus<W: Write>(mut w: W, items: &[CorpusItem]) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for item in items {
        w.write_all(&item.spec.to_bytes())?;
        for &p in item.image.pixels() {
            w.write_all(&p.to_le_bytes())?;
        }
        w.write_all(&(item.caption.len() as u16).to_le_bytes())?;
        for &t in &item.caption {
            w.write_all(&(t as u16).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated corpus: {e}")))?;
    Ok(buf)
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Vec<CorpusItem>> {
    let magic: [u8; 7] = read_exact(&mut r)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format("not an ORTSYN1 corpus".into()));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let spec = ShapeSpec::from_bytes(read_exact(&mut r)?)?;
        let mut pixels = Vec::with_capacity(PIXELS);
        for _ in 0..PIXELS {
            pixels.push(f32::from_le_bytes(read_exact(&mut r)?));
        }
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut caption = Vec::with_capacity(len);
        for _ in 0..len {
            caption.push(u16::from_le_bytes(read_exact(&mut r)?) as TokenId);
        }
        items.push(CorpusItem {
            spec,
            image: Image::new(pixels)?,
            caption,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig::default();
        assert_eq!(make_corpus(3, 100, Split::Train, &cfg), make_corpus(3, 100, Split::Train, &cfg));
        assert_ne!(make_corpus(3, 100, Split::Train, &cfg), make_corpus(4, 100, Split::Train, &cfg));
    }

    #[test]
    fn stratified_block_covers_every_spec_once() {
        let items = make_corpus(0, 64, Split::Train, &SynthConfig::default());
        let mut seen = [0usize; 64];
        for it in &items {
            seen[it.spec.index()] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn splits_draw_different_noise() {
        let cfg = SynthConfig::default();
        let a = make_corpus(0, 64, Split::Train, &cfg);
        let b = make_corpus(0, 64, Split::HeldOut, &cfg);
        for x in &a {
            for y in &b {
                assert_ne!(x.image, y.image);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let items = make_corpus(1, 10, Split::Train, &SynthConfig::default());
        let mut buf = Vec::new();
        write_corpus(&mut buf, &items).unwrap();
        assert_eq!(&buf[..7], b"ORTSYN1");
        assert_eq!(buf.len(), 7 + 4 + 10 * (4 + 256 * 4 + 2 + 6 * 2));
        assert_eq!(read_corpus(&buf[..]).unwrap(), items);
        assert!(read_corpus(&buf[..buf.len() - 1]).is_err());
    }
}
