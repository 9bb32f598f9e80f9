//! Counter-based randomness. Every random draw in a run comes from one
//! 64-bit seed split into per-purpose ChaCha8 streams, so variants that
//! share a seed share data order while differing only where intended.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mixmodal_tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    /// Batch composition and layout choice.
    Data = 1,
    /// Diffusion noise ε.
    Noise = 2,
    /// Diffusion timestep draws.
    Timestep = 3,
    /// Parameter initialization.
    Init = 4,
    /// Condition dropout for guidance training.
    Dropout = 5,
    /// Sampling noise at inference.
    Sample = 6,
    /// Training-set corpus generation.
    CorpusTrain = 7,
    /// Held-out corpus generation.
    CorpusHeldOut = 8,
}

impl Stream {
    pub const ALL: [Stream; 8] = [
        Stream::Data,
        Stream::Noise,
        Stream::Timestep,
        Stream::Init,
        Stream::Dropout,
        Stream::Sample,
        Stream::CorpusTrain,
        Stream::CorpusHeldOut,
    ];

    pub fn id(self) -> u64 {
        self as u64
    }
}

/// A ChaCha8 generator on `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    /// `(stream id, word position)` per stream.
    pub positions: Vec<(u64, u128)>,
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    rngs: Vec<(Stream, ChaCha8Rng)>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rngs: Stream::ALL.iter().map(|&s| (s, stream_rng(seed, s.id()))).collect(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, stream: Stream) -> &mut ChaCha8Rng {
        &mut self
            .rngs
            .iter_mut()
            .find(|(s, _)| *s == stream)
            .expect("all streams are constructed")
            .1
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            positions: self.rngs.iter().map(|(s, r)| (s.id(), r.get_word_pos())).collect(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut streams = Self::new(state.seed);
        for &(id, pos) in &state.positions {
            if let Some((_, r)) = streams.rngs.iter_mut().find(|(s, _)| s.id() == id) {
                r.set_word_pos(pos);
            }
        }
        streams
    }
}

pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    let x: f64 = rng.sample(StandardNormal);
    T::lit(x)
}

pub fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            T::lit(x * std)
        })
        .collect()
}
