//! Per-patch vision autoencoder.
//!
//! Encoder: linear 16→d_v followed by a residual mixing layer
//! `z + silu(z)·M`. Decoders mirror it. The quantized variant snaps each
//! feature to its nearest codebook row during training (straight-through);
//! the continuous decoder is a copy of the quantized decoder finetuned on
//! unquantized features with the encoder frozen.

use rand::Rng;

use mixmodal_tensor::{AdamW, AdamWConfig, NodeId, ParamStore, Scalar, Tensor};

use crate::config::AutoencoderConfig;
use crate::embedding::quantize_hard;
use crate::error::{Error, Result};
use crate::nn::{apply_gradients, gaussian_tensor, Ctx};
use crate::rng::{stream_rng, Stream};
use crate::synth::corpus::CorpusItem;
use crate::synth::shapes::{Image, PATCH_SIDE};

pub const GROUP: &str = "autoencoder";
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE;
pub const PATCHES: usize = 16;

pub const ENC_W: &str = "ae.enc.w";
pub const ENC_B: &str = "ae.enc.b";
pub const ENC_MIX: &str = "ae.enc.mix";
pub const CODEBOOK: &str = "ae.codebook";
/// Scalar multiplier applied to encoder outputs (and undone before
/// decoding) so that features have unit standard deviation.
pub const SCALE: &str = "ae.scale";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Decoder trained jointly with quantization.
    Quantized,
    /// Decoder finetuned on continuous features.
    Continuous,
}

impl DecoderKind {
    fn prefix(self) -> &'static str {
        match self {
            DecoderKind::Quantized => "ae.dec",
            DecoderKind::Continuous => "ae.cdec",
        }
    }
}

/// `n × d_v` patch features of one image, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures<T>(Tensor<T>);

impl<T: Scalar> PatchFeatures<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 || t.rows() != PATCHES {
            return Err(Error::Format(format!("patch features must be {PATCHES} × d_v, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::Format("non-finite patch feature".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn patch(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        (0..PATCHES).map(|i| self.0.row(i).to_vec()).collect()
    }
}

pub fn image_patch_matrix<T: Scalar>(images: &[&Image]) -> Tensor<T> {
    let mut data = Vec::with_capacity(images.len() * PATCHES * PATCH_PIXELS);
    for img in images {
        for p in 0..PATCHES {
            data.extend(img.patch(p).iter().map(|&x| T::lit(x as f64)));
        }
    }
    Tensor::matrix(images.len() * PATCHES, PATCH_PIXELS, data)
}

fn feature_scale<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store.tensor(SCALE).map_or(1.0, |t| t.item().as_f64())
}

fn encode_node<T: Scalar>(ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
    let z = ctx.linear(x, ENC_W, Some(ENC_B))?;
    let act = ctx.g.silu(z)?;
    let mixed = ctx.linear(act, ENC_MIX, None)?;
    let z = ctx.g.add(z, mixed)?;
    let s = feature_scale(ctx.store());
    Ok(if s == 1.0 { z } else { ctx.g.scale(z, s)? })
}

fn decode_node<T: Scalar>(ctx: &mut Ctx<'_, T>, z: NodeId, kind: DecoderKind) -> Result<NodeId> {
    let pre = kind.prefix();
    let s = feature_scale(ctx.store());
    let z = if s == 1.0 { z } else { ctx.g.scale(z, 1.0 / s)? };
    let act = ctx.g.silu(z)?;
    let mixed = ctx.linear(act, &format!("{pre}.mix"), None)?;
    let y = ctx.g.add(z, mixed)?;
    ctx.linear(y, &format!("{pre}.w"), Some(&format!("{pre}.b")))
}

/// Autoencoder parameters in their own store (group `autoencoder`).
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<T> {
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<f64>,
    /// Assignments per code on the evaluation subset after training.
    pub code_usage: Vec<usize>,
}

impl<T: Scalar> Autoencoder<T> {
    /// Linear maps are identity and mixing layers zero; requires
    /// `patch_dim == 16`, in which case decode∘encode is exact.
    pub fn identity(codebook_size: usize) -> Self {
        let d = PATCH_PIXELS;
        let mut params = ParamStore::new();
        params.insert(ENC_W, GROUP, Tensor::identity(d));
        params.insert(ENC_B, GROUP, Tensor::zeros(&[1, d]));
        params.insert(ENC_MIX, GROUP, Tensor::zeros(&[d, d]));
        for kind in [DecoderKind::Quantized, DecoderKind::Continuous] {
            let pre = kind.prefix();
            params.insert(format!("{pre}.mix"), GROUP, Tensor::zeros(&[d, d]));
            params.insert(format!("{pre}.w"), GROUP, Tensor::identity(d));
            params.insert(format!("{pre}.b"), GROUP, Tensor::zeros(&[1, d]));
        }
        params.insert(CODEBOOK, GROUP, Tensor::zeros(&[codebook_size.max(1), d]));
        params.insert(SCALE, GROUP, Tensor::ones(&[1, 1]));
        Self { params }
    }

    pub fn random(cfg: &AutoencoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let (p, d) = (PATCH_PIXELS, cfg.patch_dim);
        let mut params = ParamStore::new();
        params.insert(ENC_W, GROUP, gaussian_tensor(rng, &[p, d], 1.0 / (p as f64).sqrt()));
        params.insert(ENC_B, GROUP, Tensor::zeros(&[1, d]));
        params.insert(ENC_MIX, GROUP, gaussian_tensor(rng, &[d, d], 0.1));
        params.insert("ae.dec.mix", GROUP, gaussian_tensor(rng, &[d, d], 0.1));
        params.insert("ae.dec.w", GROUP, gaussian_tensor(rng, &[d, p], 1.0 / (d as f64).sqrt()));
        params.insert("ae.dec.b", GROUP, Tensor::full(&[1, p], T::lit(0.25)));
        params.insert(CODEBOOK, GROUP, gaussian_tensor(rng, &[cfg.codebook_size, d], 1.0));
        params.insert(SCALE, GROUP, Tensor::ones(&[1, 1]));
        Self { params }
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, p) in store.iter() {
            if p.group == GROUP {
                params.insert(name, GROUP, p.tensor.clone());
            }
        }
        if !params.contains(ENC_W) {
            return Err(Error::MissingParam(ENC_W.into()));
        }
        Ok(Self { params })
    }

    pub fn patch_dim(&self) -> usize {
        self.params.tensor(ENC_W).expect("encoder weight").cols()
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.params.tensor(CODEBOOK).expect("codebook")
    }

    pub fn has_continuous_decoder(&self) -> bool {
        self.params.contains("ae.cdec.w")
    }

    pub fn encode(&self, image: &Image) -> Result<PatchFeatures<T>> {
        encode_with(&self.params, image)
    }

    pub fn decode(&self, features: &PatchFeatures<T>, kind: DecoderKind) -> Result<Image> {
        decode_with(&self.params, features, kind)
    }

    /// Snaps every feature row to its nearest code.
    pub fn quantize(&self, features: &PatchFeatures<T>) -> Result<(PatchFeatures<T>, Vec<usize>)> {
        let cb = self.codebook();
        let mut idx = Vec::with_capacity(PATCHES);
        let mut data = Vec::with_capacity(features.tensor().numel());
        for i in 0..PATCHES {
            let j = quantize_hard(features.patch(i), cb)?;
            idx.push(j);
            data.extend_from_slice(cb.row(j));
        }
        Ok((PatchFeatures::new(Tensor::matrix(PATCHES, features.dim(), data))?, idx))
    }

    /// Reconstruction through the quantized path: `D(q(E(x)))`.
    pub fn reconstruct_quantized(&self, image: &Image) -> Result<Image> {
        let (q, _) = self.quantize(&self.encode(image)?)?;
        self.decode(&q, DecoderKind::Quantized)
    }

    /// Reconstruction through the continuous path: `D'(E(x))`.
    pub fn reconstruct_continuous(&self, image: &Image) -> Result<Image> {
        self.decode(&self.encode(image)?, DecoderKind::Continuous)
    }

    pub fn encoder_digest(&self) -> [u8; 32] {
        let enc_only = {
            let mut s = ParamStore::new();
            for name in [ENC_W, ENC_B, ENC_MIX, SCALE] {
                s.insert(name, GROUP, self.params.tensor(name).expect("encoder param").clone());
            }
            s
        };
        enc_only.group_digest(GROUP)
    }
}

pub fn encode_with<T: Scalar>(store: &ParamStore<T>, image: &Image) -> Result<PatchFeatures<T>> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.constant(image_patch_matrix(&[image]));
    let z = encode_node(&mut ctx, x)?;
    PatchFeatures::new(ctx.value(z).clone())
}

pub fn decode_with<T: Scalar>(store: &ParamStore<T>, features: &PatchFeatures<T>, kind: DecoderKind) -> Result<Image> {
    let mut ctx = Ctx::new(store, false);
    let z = ctx.constant(features.tensor().clone());
    let y = decode_node(&mut ctx, z, kind)?;
    let out = ctx.value(y);
    if out.cols() != PATCH_PIXELS {
        return Err(Error::Format(format!("decoder emits {} pixels per patch", out.cols())));
    }
    let patches: Vec<Vec<f32>> = (0..PATCHES)
        .map(|i| out.row(i).iter().map(|&v| v.as_f64() as f32).collect())
        .collect();
    Image::from_patches(&patches)
}

fn sample_batch<T: Scalar>(all: &Tensor<T>, images: usize, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * PATCHES * PATCH_PIXELS);
    for _ in 0..batch {
        let i = rng.random_range(0..images);
        data.extend_from_slice(&all.data()[i * PATCHES * PATCH_PIXELS..(i + 1) * PATCHES * PATCH_PIXELS]);
    }
    Tensor::matrix(batch * PATCHES, PATCH_PIXELS, data)
}

const EVAL_IMAGES: usize = 512;

/// Trains the quantized autoencoder with a straight-through estimator.
///
/// Loss: `mse(D(st(z)), x) + mse(q, sg(z)) + β·mse(z, sg(q))` where `q` is
/// the nearest code and `st(z) = z + sg(q − z)`.
pub fn train_vq_autoencoder<T: Scalar>(
    corpus: &[CorpusItem],
    cfg: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder<T>, VqReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut init_rng = stream_rng(seed, Stream::Init.id());
    let mut data_rng = stream_rng(seed, Stream::Data.id());
    let mut ae = Autoencoder::<T>::random(cfg, &mut init_rng);
    let images: Vec<&Image> = corpus.iter().map(|c| &c.image).collect();
    let all = image_patch_matrix::<T>(&images);
    let eval = image_patch_matrix::<T>(&images[..images.len().min(EVAL_IMAGES)]);

    // Seed the codebook with encoder outputs of random patches.
    {
        let mut ctx = Ctx::new(&ae.params, false);
        let x = ctx.constant(eval.clone());
        let z = encode_node(&mut ctx, x)?;
        let feats = ctx.value(z).clone();
        let k = cfg.codebook_size;
        let mut cb = Vec::with_capacity(k * cfg.patch_dim);
        for _ in 0..k {
            let r = init_rng.random_range(0..feats.rows());
            cb.extend(feats.row(r).iter().map(|&v| v + T::lit(0.01 * crate::rng::normal::<f64>(&mut init_rng))));
        }
        *ae.params.tensor_mut(CODEBOOK).expect("codebook") = Tensor::matrix(k, cfg.patch_dim, cb);
    }

    ae.params.set_trainable(|_| true);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.vq_lr,
        ..AdamWConfig::default()
    });
    let initial_loss = vq_recon_loss(&ae, &eval)?;
    let mut curve = Vec::with_capacity(cfg.vq_steps);
    for step in 0..cfg.vq_steps {
        let x = sample_batch(&all, images.len(), cfg.vq_batch, &mut data_rng);
        let (loss, grads) = {
            let mut ctx = Ctx::new(&ae.params, true);
            let loss = vq_loss_node(&mut ctx, x, cfg.commitment)?;
            ctx.gradients(loss)?
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "autoencoder loss".into(),
            });
        }
        curve.push(loss);
        apply_gradients(&mut ae.params, &mut opt, &grads)?;
    }
    ae.params.set_trainable(|_| false);
    normalize_feature_scale(&mut ae, &eval)?;
    let final_loss = vq_recon_loss(&ae, &eval)?;
    let code_usage = code_usage(&ae, &eval)?;
    Ok((
        ae,
        VqReport {
            initial_loss,
            final_loss,
            curve,
            code_usage,
        },
    ))
}

fn vq_loss_node<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Tensor<T>, beta: f64) -> Result<NodeId> {
    let xn = ctx.constant(x);
    let z = encode_node(ctx, xn)?;
    let zv = ctx.value(z).clone();
    let cb_node = ctx.p(CODEBOOK)?;
    let cb = ctx.store().tensor(CODEBOOK).expect("codebook").clone();
    let idx = (0..zv.rows()).map(|r| quantize_hard(zv.row(r), &cb)).collect::<Result<Vec<_>>>()?;
    let q = ctx.g.gather(cb_node, idx)?;
    let qv = ctx.value(q).clone();
    let offset = Tensor::new(
        zv.shape().to_vec(),
        qv.data().iter().zip(zv.data()).map(|(&a, &b)| a - b).collect(),
    )?;
    let offset = ctx.constant(offset);
    let st = ctx.g.add(z, offset)?;
    let recon = decode_node(ctx, st, DecoderKind::Quantized)?;
    let rec_loss = ctx.g.mse(recon, xn)?;
    let z_const = ctx.constant(zv);
    let q_const = ctx.constant(qv);
    let cb_loss = ctx.g.mse(q, z_const)?;
    let commit = ctx.g.mse(z, q_const)?;
    let commit = ctx.g.scale(commit, beta)?;
    let total = ctx.g.add(rec_loss, cb_loss)?;
    Ok(ctx.g.add(total, commit)?)
}

/// Sets the feature scale to `1/std` of the encoder outputs on `x` and
/// moves the codebook into the rescaled space. Reconstructions are
/// unchanged up to rounding.
fn normalize_feature_scale<T: Scalar>(ae: &mut Autoencoder<T>, x: &Tensor<T>) -> Result<()> {
    let mut ctx = Ctx::new(&ae.params, false);
    let xn = ctx.constant(x.clone());
    let z = encode_node(&mut ctx, xn)?;
    let vals: Vec<f64> = ctx.value(z).data().iter().map(|v| v.as_f64()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std.is_finite() && std > 0.0) {
        return Ok(());
    }
    let s = feature_scale(&ae.params) / std;
    let factor = T::lit(1.0 / std);
    for v in ae.params.tensor_mut(CODEBOOK).expect("codebook").data_mut() {
        *v = *v * factor;
    }
    *ae.params.tensor_mut(SCALE).expect("scale") = Tensor::full(&[1, 1], T::lit(s));
    Ok(())
}

/// Pixel MSE of the quantized reconstruction (before clamping).
pub fn vq_recon_loss<T: Scalar>(ae: &Autoencoder<T>, x: &Tensor<T>) -> Result<f64> {
    let mut ctx = Ctx::new(&ae.params, false);
    let xn = ctx.constant(x.clone());
    let z = encode_node(&mut ctx, xn)?;
    let zv = ctx.value(z).clone();
    let cb = ae.codebook();
    let idx = (0..zv.rows()).map(|r| quantize_hard(zv.row(r), cb)).collect::<Result<Vec<_>>>()?;
    let cbn = ctx.p(CODEBOOK)?;
    let q = ctx.g.gather(cbn, idx)?;
    let recon = decode_node(&mut ctx, q, DecoderKind::Quantized)?;
    let loss = ctx.g.mse(recon, xn)?;
    Ok(ctx.value(loss).item().as_f64())
}

fn code_usage<T: Scalar>(ae: &Autoencoder<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let mut ctx = Ctx::new(&ae.params, false);
    let xn = ctx.constant(x.clone());
    let z = encode_node(&mut ctx, xn)?;
    let zv = ctx.value(z);
    let cb = ae.codebook();
    let mut usage = vec![0; cb.rows()];
    for r in 0..zv.rows() {
        usage[quantize_hard(zv.row(r), cb)?] += 1;
    }
    Ok(usage)
}

/// Continuous-decoder reconstruction MSE on `x`.
pub fn continuous_recon_loss<T: Scalar>(ae: &Autoencoder<T>, x: &Tensor<T>) -> Result<f64> {
    let mut ctx = Ctx::new(&ae.params, false);
    let xn = ctx.constant(x.clone());
    let z = encode_node(&mut ctx, xn)?;
    let recon = decode_node(&mut ctx, z, DecoderKind::Continuous)?;
    let loss = ctx.g.mse(recon, xn)?;
    Ok(ctx.value(loss).item().as_f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<f64>,
}

/// Freezes the encoder, drops quantization and trains a copy of the
/// decoder to reconstruct pixels from continuous features (plain MSE).
pub fn finetune_continuous_decoder<T: Scalar>(
    ae: &Autoencoder<T>,
    corpus: &[CorpusItem],
    cfg: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder<T>, FinetuneReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut out = ae.clone();
    for suffix in ["mix", "w", "b"] {
        let t = ae
            .params
            .tensor(&format!("ae.dec.{suffix}"))
            .ok_or_else(|| Error::MissingParam(format!("ae.dec.{suffix}")))?
            .clone();
        out.params.insert(format!("ae.cdec.{suffix}"), GROUP, t);
    }
    out.params.set_trainable(|_| false);
    for suffix in ["mix", "w", "b"] {
        let name = format!("ae.cdec.{suffix}");
        let p = out.params.tensor(&name).expect("just inserted").clone();
        out.params.remove(&name);
        out.params.insert(name.clone(), "autoencoder.cdec", p);
    }
    out.params.set_trainable(|g| g == "autoencoder.cdec");

    let mut data_rng = stream_rng(seed, Stream::Data.id());
    let images: Vec<&Image> = corpus.iter().map(|c| &c.image).collect();
    let all = image_patch_matrix::<T>(&images);
    let eval = image_patch_matrix::<T>(&images[..images.len().min(EVAL_IMAGES)]);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.finetune_lr,
        ..AdamWConfig::default()
    });
    let initial_loss = continuous_recon_loss(&out, &eval)?;
    let mut curve = Vec::with_capacity(cfg.finetune_steps);
    for step in 0..cfg.finetune_steps {
        let x = sample_batch(&all, images.len(), cfg.finetune_batch, &mut data_rng);
        let (loss, grads) = {
            let mut ctx = Ctx::new(&out.params, true);
            let xn = ctx.constant(x);
            let z = encode_node(&mut ctx, xn)?;
            let recon = decode_node(&mut ctx, z, DecoderKind::Continuous)?;
            let loss = ctx.g.mse(recon, xn)?;
            ctx.gradients(loss)?
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "decoder finetune loss".into(),
            });
        }
        curve.push(loss);
        apply_gradients(&mut out.params, &mut opt, &grads)?;
    }
    // Restore the single autoencoder group.
    for suffix in ["mix", "w", "b"] {
        let name = format!("ae.cdec.{suffix}");
        let p = out.params.remove(&name).expect("present");
        out.params.insert(name, GROUP, p.tensor);
    }
    out.params.set_trainable(|_| false);
    let final_loss = continuous_recon_loss(&out, &eval)?;
    Ok((
        out,
        FinetuneReport {
            initial_loss,
            final_loss,
            curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::synth::corpus::{make_corpus, Split};
    use crate::synth::shapes::{render, ShapeSpec};

    #[test]
    fn identity_configuration_is_exact() {
        let ae = Autoencoder::<f32>::identity(4);
        for spec in ShapeSpec::all().iter().step_by(7) {
            let img = render(spec);
            let f = ae.encode(&img).unwrap();
            assert_eq!(ae.decode(&f, DecoderKind::Quantized).unwrap(), img);
        }
    }

    #[test]
    fn zero_image_stays_finite_and_in_range() {
        let mut rng = stream_rng(0, 0);
        let ae = Autoencoder::<f32>::random(&AutoencoderConfig::default(), &mut rng);
        let f = ae.encode(&Image::filled(0.0)).unwrap();
        assert!(f.tensor().all_finite());
        assert_eq!(f.tensor().shape(), &[16, 8]);
        let out = ae.decode(&f, DecoderKind::Quantized).unwrap();
        assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn wrong_feature_shape_is_rejected() {
        assert!(PatchFeatures::new(Tensor::<f32>::zeros(&[15, 8])).is_err());
    }

    #[test]
    fn single_code_maps_everything_to_it() {
        let corpus = make_corpus(0, 64, Split::Train, &SynthConfig::default());
        let cfg = AutoencoderConfig {
            codebook_size: 1,
            vq_steps: 20,
            ..AutoencoderConfig::default()
        };
        let (ae, report) = train_vq_autoencoder::<f32>(&corpus, &cfg, 0).unwrap();
        assert_eq!(report.code_usage, vec![64 * 16]);
        let (_, idx) = ae.quantize(&ae.encode(&corpus[0].image).unwrap()).unwrap();
        assert!(idx.iter().all(|&i| i == 0));
    }
}
