//! Pre-norm causal transformer with rotary positions.
//!
//! Sequences of a batch are stacked row-wise; `spans` gives each
//! sequence's row range. Positions restart at 0 in every span and
//! attention never crosses a span boundary.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use mixmodal_tensor::{NodeId, ParamStore, Scalar, Tensor};

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{gaussian_tensor, Ctx};

pub const GROUP: &str = "backbone";

fn layer_name(l: usize, suffix: &str) -> String {
    format!("blk{l}.{suffix}")
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.width;
    let hidden = d * cfg.mlp_ratio;
    let std = cfg.init_std;
    let out_std = std / ((2 * cfg.layers.max(1)) as f64).sqrt();
    for l in 0..cfg.layers {
        let mut put = |suffix: &str, t: Tensor<T>| store.insert(layer_name(l, suffix), GROUP, t);
        put("ln1.g", Tensor::ones(&[1, d]));
        put("ln1.b", Tensor::zeros(&[1, d]));
        put("attn.wq", gaussian_tensor(rng, &[d, d], std));
        put("attn.wk", gaussian_tensor(rng, &[d, d], std));
        put("attn.wv", gaussian_tensor(rng, &[d, d], std));
        put("attn.wo", gaussian_tensor(rng, &[d, d], out_std));
        put("ln2.g", Tensor::ones(&[1, d]));
        put("ln2.b", Tensor::zeros(&[1, d]));
        put("mlp.w1", gaussian_tensor(rng, &[d, hidden], std));
        put("mlp.b1", Tensor::zeros(&[1, hidden]));
        put("mlp.w2", gaussian_tensor(rng, &[hidden, d], out_std));
        put("mlp.b2", Tensor::zeros(&[1, d]));
    }
    store.insert("final_ln.g", GROUP, Tensor::ones(&[1, d]));
    store.insert("final_ln.b", GROUP, Tensor::zeros(&[1, d]));
}

/// Constant matrix `R` with `x·R = rotate_half(x)` applied per head:
/// within each head the halves `(x1, x2)` map to `(−x2, x1)`.
fn rotate_half_matrix<T: Scalar>(d: usize, head_dim: usize) -> Tensor<T> {
    let half = head_dim / 2;
    let mut r = Tensor::zeros(&[d, d]);
    for h in 0..d / head_dim {
        let base = h * head_dim;
        for i in 0..half {
            // out[base + i] = -x[base + half + i]
            r.data_mut()[(base + half + i) * d + base + i] = -T::one();
            // out[base + half + i] = x[base + i]
            r.data_mut()[(base + i) * d + base + half + i] = T::one();
        }
    }
    r
}

/// `cos` and `sin` tables, one row per stacked position.
fn rope_tables<T: Scalar>(positions: &[usize], d: usize, head_dim: usize, base: f64) -> (Tensor<T>, Tensor<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * d);
    let mut sin = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for c in 0..d {
            let i = (c % head_dim) % half;
            let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(T::lit(theta.cos()));
            sin.push(T::lit(theta.sin()));
        }
    }
    (
        Tensor::matrix(positions.len(), d, cos),
        Tensor::matrix(positions.len(), d, sin),
    )
}

fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |k| if k % n > k / n { T::neg_infinity() } else { T::zero() })
}

struct Rope {
    cos: NodeId,
    sin: NodeId,
    rot: NodeId,
}

fn apply_rope<T: Scalar>(ctx: &mut Ctx<'_, T>, x: NodeId, rope: &Rope) -> Result<NodeId> {
    let a = ctx.g.mul(x, rope.cos)?;
    let r = ctx.g.matmul(x, rope.rot)?;
    let b = ctx.g.mul(r, rope.sin)?;
    Ok(ctx.g.add(a, b)?)
}

fn attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    h: NodeId,
    l: usize,
    spans: &[Range<usize>],
    cfg: &BackboneConfig,
    rope: &Rope,
    masks: &mut Vec<(usize, NodeId)>,
) -> Result<NodeId> {
    let q = ctx.linear(h, &layer_name(l, "attn.wq"), None)?;
    let k = ctx.linear(h, &layer_name(l, "attn.wk"), None)?;
    let v = ctx.linear(h, &layer_name(l, "attn.wv"), None)?;
    let q = apply_rope(ctx, q, rope)?;
    let k = apply_rope(ctx, k, rope)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut seq_outs = Vec::with_capacity(spans.len());
    for span in spans {
        let n = span.len();
        let mask = match masks.iter().find(|(len, _)| *len == n) {
            Some(&(_, id)) => id,
            None => {
                let id = ctx.constant(causal_mask(n));
                masks.push((n, id));
                id
            }
        };
        let (qs, ks, vs) = if spans.len() == 1 {
            (q, k, v)
        } else {
            (
                ctx.g.slice(q, 0, span.start, span.end)?,
                ctx.g.slice(k, 0, span.start, span.end)?,
                ctx.g.slice(v, 0, span.start, span.end)?,
            )
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (c0, c1) = (hd * dh, (hd + 1) * dh);
            let qh = ctx.g.slice(qs, 1, c0, c1)?;
            let kh = ctx.g.slice(ks, 1, c0, c1)?;
            let vh = ctx.g.slice(vs, 1, c0, c1)?;
            let scores = ctx.g.matmul_nt(qh, kh)?;
            let scores = ctx.g.scale(scores, scale)?;
            let scores = ctx.g.add(scores, mask)?;
            let attn = ctx.g.row_softmax(scores)?;
            heads.push(ctx.g.matmul(attn, vh)?);
        }
        seq_outs.push(ctx.g.concat(&heads, 1)?);
    }
    let merged = ctx.g.concat(&seq_outs, 0)?;
    ctx.linear(merged, &layer_name(l, "attn.wo"), None)
}

/// Output states for stacked sequences `x` (`N × d_e`).
pub fn forward_states<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: NodeId,
    spans: &[Range<usize>],
    cfg: &BackboneConfig,
) -> Result<NodeId> {
    let total: usize = spans.iter().map(Range::len).sum();
    if ctx.value(x).rows() != total || spans.iter().any(|s| s.is_empty()) {
        return Err(Error::Format(format!(
            "{} input rows do not match spans totalling {total}",
            ctx.value(x).rows()
        )));
    }
    if let Some(s) = spans.iter().find(|s| s.len() > cfg.max_len) {
        return Err(Error::SequenceTooLong {
            len: s.len(),
            max: cfg.max_len,
        });
    }
    let d = cfg.width;
    let positions: Vec<usize> = spans.iter().flat_map(|s| 0..s.len()).collect();
    let (cos, sin) = rope_tables::<T>(&positions, d, cfg.head_dim(), cfg.rope_base);
    let rope = Rope {
        cos: ctx.constant(cos),
        sin: ctx.constant(sin),
        rot: ctx.constant(rotate_half_matrix(d, cfg.head_dim())),
    };
    let mut masks = Vec::new();
    let mut h = x;
    for l in 0..cfg.layers {
        let n1 = ctx.layer_norm_affine(h, &layer_name(l, "ln1.g"), &layer_name(l, "ln1.b"), cfg.norm_eps)?;
        let a = attention(ctx, n1, l, spans, cfg, &rope, &mut masks)?;
        h = ctx.g.add(h, a)?;
        let n2 = ctx.layer_norm_affine(h, &layer_name(l, "ln2.g"), &layer_name(l, "ln2.b"), cfg.norm_eps)?;
        let m = ctx.linear(n2, &layer_name(l, "mlp.w1"), Some(&layer_name(l, "mlp.b1")))?;
        let m = ctx.g.gelu(m)?;
        let m = ctx.linear(m, &layer_name(l, "mlp.w2"), Some(&layer_name(l, "mlp.b2")))?;
        h = ctx.g.add(h, m)?;
        if !ctx.value(h).all_finite() {
            return Err(Error::NonFiniteActivation { layer: l });
        }
    }
    ctx.layer_norm_affine(h, "final_ln.g", "final_ln.b", cfg.norm_eps)
}

/// Output states of one already-embedded sequence (`n × d_e`).
pub fn states<T: Scalar>(store: &ParamStore<T>, x: Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let n = x.rows();
    let mut ctx = Ctx::new(store, false);
    let xn = ctx.constant(x);
    let f = forward_states(&mut ctx, xn, std::slice::from_ref(&(0..n)), cfg)?;
    Ok(ctx.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_half_layout() {
        let r = rotate_half_matrix::<f64>(4, 4);
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.matmul(&r).unwrap().data(), &[-3.0, -4.0, 1.0, 2.0]);
    }

    #[test]
    fn mask_is_strictly_upper() {
        let m = causal_mask::<f32>(3);
        assert_eq!(m.at(0, 0), 0.0);
        assert!(m.at(0, 1).is_infinite());
        assert_eq!(m.at(2, 1), 0.0);
    }

    #[test]
    fn position_zero_is_unrotated() {
        let (c, s) = rope_tables::<f64>(&[0, 1], 4, 4, 10_000.0);
        assert!(c.row(0).iter().all(|&v| v == 1.0));
        assert!(s.row(0).iter().all(|&v| v == 0.0));
        assert!((s.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
