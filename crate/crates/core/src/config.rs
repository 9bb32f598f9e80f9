//! Run configuration. Parsed from TOML (`key = value`, one table per
//! module); unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Softmax-weighted mixture of code embeddings (differentiable).
    Softmax,
    /// Nearest-code lookup; no gradient path to the patch feature.
    Argmin,
    /// Randomly initialized linear projection.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Diffusion,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_size: usize,
    pub held_out_size: usize,
    /// Maximum shape-center offset in pixels per axis.
    pub jitter: i32,
    /// Std of additive Gaussian pixel noise.
    pub pixel_noise: f64,
    pub stratified: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_size: 6400,
            held_out_size: 640,
            jitter: 1,
            pixel_noise: 0.02,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    /// d_v: feature width per 4×4 patch.
    pub patch_dim: usize,
    /// K: number of codes.
    pub codebook_size: usize,
    pub commitment: f64,
    pub vq_steps: usize,
    pub vq_batch: usize,
    pub vq_lr: f64,
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            patch_dim: 8,
            codebook_size: 64,
            commitment: 0.25,
            vq_steps: 2000,
            vq_batch: 64,
            vq_lr: 3e-3,
            finetune_steps: 2000,
            finetune_batch: 64,
            finetune_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    /// τ of the softmax embedding; held fixed during training.
    pub temperature: f64,
    pub init_std: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Softmax,
            temperature: 1.0,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    /// d_e
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            max_len: 64,
            vocab_size: vocab::VOCAB_SIZE,
            norm_eps: 1e-5,
            rope_base: 10_000.0,
            init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub kind: HeadKind,
    /// Channel width of the diffusion MLP (and of the MSE ablation head).
    pub width: usize,
    pub blocks: usize,
    pub time_freq_dim: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    /// Probability of swapping the condition for the learned null vector.
    pub cond_dropout: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Diffusion,
            width: 64,
            blocks: 3,
            time_freq_dim: 64,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 100,
            cfg_scale: 5.0,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageParams {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// λ in `ar + λ·diff`.
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub base: StageParams,
    pub post: StageParams,
    /// Share of post-training examples laid out caption → image.
    pub caption_to_image_fraction: f64,
    /// Window of the moving average used for "smoothed" loss values.
    pub smoothing_window: usize,
    pub ar_loss: bool,
    pub diff_loss: bool,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            steps: 2000,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            base: StageParams {
                lr: 1e-3,
                batch: 16,
                steps: 2000,
            },
            post: StageParams {
                lr: 3e-4,
                batch: 16,
                steps: 4000,
            },
            caption_to_image_fraction: 0.5,
            smoothing_window: 100,
            ar_loss: true,
            diff_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Maximum number of items generated after the prompt.
    pub step_budget: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { step_budget: 40 }
    }
}

/// Per-variant run lengths and measurement sizes for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub base_steps: usize,
    pub post_steps: usize,
    pub eval_items: usize,
    pub eval_draws: usize,
    pub caption_prompts: usize,
    pub variance_samples: usize,
    pub image_prompts: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base_steps: 300,
            post_steps: 600,
            eval_items: 256,
            eval_draws: 2,
            caption_prompts: 32,
            variance_samples: 64,
            image_prompts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthConfig,
    pub autoencoder: AutoencoderConfig,
    pub embedding: EmbeddingConfig,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub training: TrainingConfig,
    pub decode: DecodeConfig,
    pub ablation: AblationConfig,
}

/// Image patches per image (4×4 patches of a 16×16 image).
pub const PATCHES_PER_IMAGE: usize = 16;
/// Longest caption in tokens.
pub const CAPTION_LEN: usize = 6;

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Optimizer/step settings of the published 7B-scale recipe. Only for
    /// documentation and dry runs; the model sizes stay desk-scale.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.training.base = StageParams {
            lr: 1e-4,
            batch: 32,
            steps: 15_000,
        };
        c.training.post = StageParams {
            lr: 1e-5,
            batch: 16,
            steps: 35_000,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let b = &self.backbone;
        if b.heads == 0 || !b.width.is_multiple_of(b.heads) {
            return bad(format!("width {} not divisible by heads {}", b.width, b.heads));
        }
        if !b.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even for rotary positions", b.head_dim()));
        }
        if b.vocab_size < vocab::USED_TOKENS {
            return bad(format!("vocab_size {} below {} used tokens", b.vocab_size, vocab::USED_TOKENS));
        }
        // caption + [SEP] + [BOI] + patches + [EOI] + [EOS]
        let needed = CAPTION_LEN + PATCHES_PER_IMAGE + 4;
        if b.max_len < needed {
            return bad(format!("max_len {} below longest layout {needed}", b.max_len));
        }
        let h = &self.heads;
        if !(0.0 < h.beta_start && h.beta_start < h.beta_end && h.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start < beta_end < 1, got {} {}", h.beta_start, h.beta_end));
        }
        if h.ddim_steps == 0 || h.ddim_steps > h.train_steps {
            return bad(format!("ddim_steps {} must be in 1..={}", h.ddim_steps, h.train_steps));
        }
        if !h.time_freq_dim.is_multiple_of(2) || h.time_freq_dim == 0 {
            return bad("time_freq_dim must be even and positive".into());
        }
        if !(0.0..1.0).contains(&h.cond_dropout) {
            return bad(format!("cond_dropout {} outside [0,1)", h.cond_dropout));
        }
        if self.embedding.temperature <= 0.0 {
            return bad(format!("temperature must be positive, got {}", self.embedding.temperature));
        }
        if self.autoencoder.codebook_size == 0 || self.autoencoder.patch_dim == 0 {
            return bad("codebook_size and patch_dim must be positive".into());
        }
        if self.training.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.training.lambda));
        }
        if !(0.0..=1.0).contains(&self.training.caption_to_image_fraction) {
            return bad("caption_to_image_fraction outside [0,1]".into());
        }
        for (name, s) in [("base", &self.training.base), ("post", &self.training.post)] {
            if s.batch == 0 {
                return bad(format!("{name}.batch must be positive"));
            }
        }
        if self.synth.train_size == 0 || self.synth.held_out_size == 0 {
            return bad("corpus sizes must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn misspelled_key_is_rejected() {
        let err = Config::from_toml("[heads]\ncfg_scael = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("cfg_scael"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("seed = 9\n[training]\nlambda = 10.0\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.training.lambda, 10.0);
        assert_eq!(c.heads.cfg_scale, 5.0);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("[backbone]\nheads = 3\n").is_err());
        assert!(Config::from_toml("[heads]\nbeta_start = 0.5\nbeta_end = 0.1\n").is_err());
        assert!(Config::from_toml("[embedding]\ntemperature = 0.0\n").is_err());
    }

    #[test]
    fn published_optimizer_settings() {
        let c = Config::paper_scale();
        assert_eq!((c.training.beta1, c.training.beta2), (0.9, 0.99));
        assert_eq!(c.training.base.lr, 1e-4);
        assert_eq!(c.training.base.batch, 32);
        assert_eq!(c.training.base.steps, 15_000);
        assert_eq!(c.training.post.lr, 1e-5);
        assert_eq!(c.training.post.batch, 16);
        assert_eq!(c.training.post.steps, 35_000);
        assert_eq!(c.training.lambda, 100.0);
        assert_eq!(c.heads.cfg_scale, 5.0);
        assert_eq!(c.heads.ddim_steps, 100);
        assert_eq!(c.heads.train_steps, 1000);
        assert_eq!(c.heads.blocks, 3);
    }
}
