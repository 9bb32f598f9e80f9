//! Output heads: the LM head for tokens, the diffusion head (with its
//! schedule, guidance and DDIM sampler) for patches, and the MSE
//! regression head used in the ablation.

pub mod diffusion;
pub mod lm;
pub mod mse;
pub mod sampler;
pub mod schedule;

pub use diffusion::{DiffusionDraw, DiffusionHead};
pub use lm::{greedy, lm_logits};
pub use sampler::{cfg_combine, ddim_sample, guided_eps, EpsPredictor};
pub use schedule::DiffusionSchedule;
