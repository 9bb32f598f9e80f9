//! Synthetic shapes-and-captions domain and the patch autoencoder.

pub mod autoencoder;
pub mod corpus;
pub mod metrics;
pub mod shapes;

pub use autoencoder::{Autoencoder, DecoderKind, PatchFeatures, VqReport};
pub use corpus::{make_corpus, read_corpus, write_corpus, CorpusItem, Split};
pub use metrics::{psnr, ssim};
pub use shapes::{render, Image, Intensity, Quadrant, ShapeKind, ShapeSpec, Size};
