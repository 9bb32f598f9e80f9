//! Per-patch noise predictor `ε_θ(x_t, t, f)`.
//!
//! The backbone state `f` is projected and added to a sinusoidal
//! timestep embedding; the sum drives AdaLN shift/scale/gate in each
//! residual block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mixmodal_tensor::{NodeId, ParamStore, Scalar, Tensor};

use crate::config::HeadsConfig;
use crate::error::{Error, Result};
use crate::heads::sampler::EpsPredictor;
use crate::heads::schedule::DiffusionSchedule;
use crate::nn::{gaussian_tensor, Ctx};
use crate::rng::{normal_vec, RngStreams, Stream};

pub const GROUP: &str = "diff_head";
pub const NULL: &str = "diff.null";

pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &HeadsConfig, d_e: usize, d_v: usize, rng: &mut ChaCha8Rng) {
    let w = cfg.width;
    let f = cfg.time_freq_dim;
    let xavier = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut put = |name: String, t: Tensor<T>| store.insert(name, GROUP, t);
    put("diff.time.w1".into(), gaussian_tensor(rng, &[f, w], xavier(f)));
    put("diff.time.b1".into(), Tensor::zeros(&[1, w]));
    put("diff.time.w2".into(), gaussian_tensor(rng, &[w, w], xavier(w)));
    put("diff.time.b2".into(), Tensor::zeros(&[1, w]));
    put("diff.cond.w".into(), gaussian_tensor(rng, &[d_e, w], xavier(d_e)));
    put("diff.cond.b".into(), Tensor::zeros(&[1, w]));
    put(NULL.into(), gaussian_tensor(rng, &[1, d_e], 1.0));
    put("diff.in.w".into(), gaussian_tensor(rng, &[d_v, w], xavier(d_v)));
    put("diff.in.b".into(), Tensor::zeros(&[1, w]));
    for b in 0..cfg.blocks {
        put(format!("diff.blk{b}.mod.w"), Tensor::zeros(&[w, 3 * w]));
        put(format!("diff.blk{b}.mod.b"), Tensor::zeros(&[1, 3 * w]));
        put(format!("diff.blk{b}.fc1.w"), gaussian_tensor(rng, &[w, w], xavier(w)));
        put(format!("diff.blk{b}.fc1.b"), Tensor::zeros(&[1, w]));
        put(format!("diff.blk{b}.fc2.w"), gaussian_tensor(rng, &[w, w], xavier(w)));
        put(format!("diff.blk{b}.fc2.b"), Tensor::zeros(&[1, w]));
    }
    put("diff.out.w".into(), Tensor::zeros(&[w, d_v]));
    put("diff.out.b".into(), Tensor::zeros(&[1, d_v]));
}

/// `[cos(t·ω_i) …, sin(t·ω_i) …]` with `ω_i = 10000^(−i/(F/2))`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|w| t as f64 * w).collect();
        data.extend(args.iter().map(|a| T::lit(a.cos())));
        data.extend(args.iter().map(|a| T::lit(a.sin())));
        data.extend(std::iter::repeat_n(T::zero(), dim - 2 * half));
    }
    Tensor::matrix(ts.len(), dim, data)
}

/// ε̂ for row-batched `x_t` (`B × d_v`), steps `t` and states `f` (`B × d_e`).
pub fn eps_node<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x_t: NodeId,
    t: &[usize],
    f: NodeId,
    cfg: &HeadsConfig,
) -> Result<NodeId> {
    if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > cfg.train_steps) {
        return Err(Error::TimestepOutOfRange {
            t: bad,
            max: cfg.train_steps,
        });
    }
    let temb = ctx.constant(timestep_embedding(t, cfg.time_freq_dim));
    let te = ctx.linear(temb, "diff.time.w1", Some("diff.time.b1"))?;
    let te = ctx.g.silu(te)?;
    let te = ctx.linear(te, "diff.time.w2", Some("diff.time.b2"))?;
    let ce = ctx.linear(f, "diff.cond.w", Some("diff.cond.b"))?;
    let c = ctx.g.add(te, ce)?;
    let c_act = ctx.g.silu(c)?;
    let w = cfg.width;
    let mut h = ctx.linear(x_t, "diff.in.w", Some("diff.in.b"))?;
    for b in 0..cfg.blocks {
        let m = ctx.linear(c_act, &format!("diff.blk{b}.mod.w"), Some(&format!("diff.blk{b}.mod.b")))?;
        let shift = ctx.g.slice(m, 1, 0, w)?;
        let scale = ctx.g.slice(m, 1, w, 2 * w)?;
        let gate = ctx.g.slice(m, 1, 2 * w, 3 * w)?;
        let n = ctx.g.layer_norm(h, 1e-6)?;
        let ns = ctx.g.mul(n, scale)?;
        let y = ctx.g.add(n, ns)?;
        let y = ctx.g.add(y, shift)?;
        let y = ctx.linear(y, &format!("diff.blk{b}.fc1.w"), Some(&format!("diff.blk{b}.fc1.b")))?;
        let y = ctx.g.silu(y)?;
        let y = ctx.linear(y, &format!("diff.blk{b}.fc2.w"), Some(&format!("diff.blk{b}.fc2.b")))?;
        let y = ctx.g.mul(gate, y)?;
        h = ctx.g.add(h, y)?;
    }
    let n = ctx.g.layer_norm(h, 1e-6)?;
    ctx.linear(n, "diff.out.w", Some("diff.out.b"))
}

/// Replaces the rows of `f` flagged in `dropped` by the learned null vector.
pub fn drop_condition<T: Scalar>(ctx: &mut Ctx<'_, T>, f: NodeId, dropped: &[bool]) -> Result<NodeId> {
    if !dropped.iter().any(|&d| d) {
        return Ok(f);
    }
    let rows = ctx.value(f).rows();
    let null = ctx.p(NULL)?;
    let table = ctx.g.concat(&[f, null], 0)?;
    let idx = dropped.iter().enumerate().map(|(i, &d)| if d { rows } else { i }).collect();
    Ok(ctx.g.gather(table, idx)?)
}

/// Noise, timesteps and condition-dropout flags for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw<T> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
    pub dropped: Vec<bool>,
}

impl<T: Scalar> DiffusionDraw<T> {
    pub fn sample(
        rows: usize,
        d_v: usize,
        steps: usize,
        p_drop: f64,
        rngs: &mut RngStreams,
    ) -> Self {
        let t = (0..rows).map(|_| rngs.get(Stream::Timestep).random_range(1..=steps)).collect();
        let eps = Tensor::matrix(rows, d_v, normal_vec(rngs.get(Stream::Noise), rows * d_v, 1.0));
        let dropped = (0..rows).map(|_| rngs.get(Stream::Dropout).random::<f64>() < p_drop).collect();
        Self { t, eps, dropped }
    }
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`, row by row.
pub fn noised<T: Scalar>(clean: &Tensor<T>, draw: &DiffusionDraw<T>, schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    let d = clean.cols();
    let mut out = Vec::with_capacity(clean.numel());
    for (r, &t) in draw.t.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..d {
            out.push(T::lit(a * clean.at(r, c).as_f64() + s * draw.eps.at(r, c).as_f64()));
        }
    }
    Ok(Tensor::matrix(clean.rows(), d, out))
}

/// Per-patch `‖ε − ε̂‖²`, averaged over rows.
pub fn loss_node<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    f: NodeId,
    clean: &Tensor<T>,
    draw: &DiffusionDraw<T>,
    schedule: &DiffusionSchedule,
    cfg: &HeadsConfig,
) -> Result<NodeId> {
    let cond = drop_condition(ctx, f, &draw.dropped)?;
    let x_t = ctx.constant(noised(clean, draw, schedule)?);
    let eps_hat = eps_node(ctx, x_t, &draw.t, cond, cfg)?;
    let eps = ctx.constant(draw.eps.clone());
    let l = ctx.g.mse(eps_hat, eps)?;
    Ok(ctx.g.scale(l, clean.cols() as f64)?)
}

/// Inference-side view of the trained head.
pub struct DiffusionHead<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub cfg: &'a HeadsConfig,
}

impl<T: Scalar> DiffusionHead<'_, T> {
    pub fn predict(&self, x_t: &[T], t: usize, f: Option<&[T]>) -> Result<Vec<T>> {
        let mut ctx = Ctx::new(self.store, false);
        let x = ctx.constant(Tensor::matrix(1, x_t.len(), x_t.to_vec()));
        let f = match f {
            Some(f) => ctx.constant(Tensor::matrix(1, f.len(), f.to_vec())),
            None => ctx.p(NULL)?,
        };
        let out = eps_node(&mut ctx, x, &[t], f, self.cfg)?;
        Ok(ctx.value(out).data().to_vec())
    }
}

impl<T: Scalar> EpsPredictor<T> for DiffusionHead<'_, T> {
    fn eps(&self, x_t: &[T], t: usize, cond: Option<&[T]>) -> Result<Vec<T>> {
        self.predict(x_t, t, cond)
    }
}

/// Finite-difference check of the per-patch diffusion loss over `cases`
/// randomized shapes, with every head parameter and the condition `f`
/// as inputs. Returns the largest relative error seen.
pub fn loss_grad_check(seed: u64, cases: usize) -> Result<f64> {
    let mut rng = crate::rng::stream_rng(seed, Stream::Init.id());
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let rows = rng.random_range(1..=4);
        let d_e = rng.random_range(1..=5);
        let d_v = rng.random_range(1..=4);
        let cfg = HeadsConfig {
            width: 2 * rng.random_range(1..=4),
            blocks: rng.random_range(1..=2),
            time_freq_dim: 2 * rng.random_range(1..=3),
            ..HeadsConfig::default()
        };
        let schedule = DiffusionSchedule::new(cfg.train_steps, cfg.beta_start, cfg.beta_end, cfg.ddim_steps)?;
        let mut store = ParamStore::new();
        init(&mut store, &cfg, d_e, d_v, &mut rng);
        // Zero-initialized projections would make most checks trivial.
        for (_, p) in store.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&normal_vec::<f64>(&mut rng, n, 0.4));
        }
        store.set_trainable(|_| true);
        let mut streams = RngStreams::new(seed.wrapping_add(case as u64));
        let mut draw = DiffusionDraw::sample(rows, d_v, cfg.train_steps, 0.3, &mut streams);
        draw.dropped[0] = case % 2 == 1;
        let clean = Tensor::matrix(rows, d_v, normal_vec(&mut rng, rows * d_v, 1.0));
        let mut ctx = Ctx::new(&store, true);
        let f = ctx.g.param("f", Tensor::matrix(rows, d_e, normal_vec(&mut rng, rows * d_e, 1.0)));
        let loss = loss_node(&mut ctx, f, &clean, &draw, &schedule, &cfg)?;
        let report = mixmodal_tensor::grad_check(&mut ctx.g, loss, 1e-4)?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn head() -> (ParamStore<f64>, HeadsConfig) {
        let cfg = HeadsConfig {
            width: 8,
            time_freq_dim: 8,
            ..HeadsConfig::default()
        };
        let mut store = ParamStore::new();
        init(&mut store, &cfg, 4, 3, &mut stream_rng(1, 1));
        (store, cfg)
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let (store, cfg) = head();
        let h = DiffusionHead { store: &store, cfg: &cfg };
        let out = h.predict(&[0.3, -1.0, 2.0], 17, Some(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn timestep_range_is_checked() {
        let (store, cfg) = head();
        let h = DiffusionHead { store: &store, cfg: &cfg };
        assert!(matches!(
            h.predict(&[0.0; 3], 0, None),
            Err(Error::TimestepOutOfRange { t: 0, .. })
        ));
        assert!(h.predict(&[0.0; 3], 1001, None).is_err());
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding::<f64>(&[0], 6);
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
