use mixmodal_core::config::HeadsConfig;
use mixmodal_core::heads::diffusion::{self, loss_node, DiffusionDraw};
use mixmodal_core::heads::{cfg_combine, ddim_sample, greedy, guided_eps, mse, DiffusionHead, DiffusionSchedule, EpsPredictor};
use mixmodal_core::nn::{apply_gradients, Ctx};
use mixmodal_core::rng::{normal_vec, stream_rng, RngStreams};
use mixmodal_core::Result;
use mixmodal_tensor::{grad_check, AdamW, AdamWConfig, ParamStore, Tensor};
use rand::Rng;

fn small_heads() -> HeadsConfig {
    HeadsConfig {
        width: 8,
        blocks: 2,
        time_freq_dim: 8,
        ..HeadsConfig::default()
    }
}

fn head_store(cfg: &HeadsConfig, d_e: usize, d_v: usize, seed: u64, randomize: bool) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, 4);
    diffusion::init(&mut store, cfg, d_e, d_v, &mut rng);
    if randomize {
        for (_, p) in store.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&normal_vec::<f64>(&mut rng, n, 0.4));
        }
    }
    store.set_trainable(|_| true);
    store
}

/// Predictor that always knows the clean point, so one DDIM step lands on it.
struct Oracle<'a> {
    x0: Vec<f64>,
    schedule: &'a DiffusionSchedule,
}

impl EpsPredictor<f64> for Oracle<'_> {
    fn eps(&self, x_t: &[f64], t: usize, _cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let ab = self.schedule.alpha_bar(t)?;
        Ok(x_t.iter().zip(&self.x0).map(|(x, c)| (x - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect())
    }
}

/// Separate, fixed functions for the two branches.
struct TwoBranch;

impl EpsPredictor<f64> for TwoBranch {
    fn eps(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(match cond {
            Some(c) => x_t.iter().zip(c).map(|(x, c)| (x * c).sin() + t as f64 * 1e-3).collect(),
            None => x_t.iter().map(|x| 0.7 * x - 0.1).collect(),
        })
    }
}

#[test]
fn cumulative_products_match_direct_product() {
    let s = DiffusionSchedule::new(1000, 1e-4, 0.02, 100).unwrap();
    for t in [1usize, 2, 10, 500, 999, 1000] {
        let direct: f64 = (1..=t).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * (i - 1) as f64 / 999.0)).product();
        assert!((s.alpha_bar(t).unwrap() - direct).abs() < 1e-14);
    }
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
    assert_eq!(s.ddim_steps().len(), 100);
    assert_eq!(*s.ddim_steps().last().unwrap(), 1000);
    assert!(DiffusionSchedule::new(10, 0.5, 0.1, 5).is_err());
    assert!(DiffusionSchedule::new(10, 0.01, 0.1, 11).is_err());
}

#[test]
fn untrained_head_loss_is_the_noise_energy() {
    let (d_e, d_v, rows) = (6, 8, 4096);
    let cfg = small_heads();
    let store = head_store(&cfg, d_e, d_v, 1, false);
    let schedule = DiffusionSchedule::new(1000, 1e-4, 0.02, 100).unwrap();
    let mut rngs = RngStreams::new(3);
    let draw = DiffusionDraw::sample(rows, d_v, 1000, 0.1, &mut rngs);
    let clean = Tensor::matrix(rows, d_v, normal_vec(&mut stream_rng(4, 0), rows * d_v, 1.0));
    let mut ctx = Ctx::new(&store, false);
    let f = ctx.constant(Tensor::matrix(rows, d_e, normal_vec(&mut stream_rng(5, 0), rows * d_e, 1.0)));
    let l = loss_node(&mut ctx, f, &clean, &draw, &schedule, &cfg).unwrap();
    let v = ctx.value(l).item();
    assert!((v - d_v as f64).abs() < 0.05 * d_v as f64, "loss {v}");
}

#[test]
fn diffusion_loss_gradients_match_finite_differences() {
    let (d_e, d_v, rows) = (4, 3, 5);
    let cfg = small_heads();
    let schedule = DiffusionSchedule::new(1000, 1e-4, 0.02, 100).unwrap();
    for case in 0..3u64 {
        let store = head_store(&cfg, d_e, d_v, 10 + case, true);
        let mut rngs = RngStreams::new(case);
        let mut draw = DiffusionDraw::sample(rows, d_v, 1000, 0.0, &mut rngs);
        draw.dropped[1] = true;
        let clean = Tensor::matrix(rows, d_v, normal_vec(&mut stream_rng(case, 9), rows * d_v, 1.0));
        let mut ctx = Ctx::new(&store, true);
        let f = ctx.g.param("f", Tensor::matrix(rows, d_e, normal_vec(&mut stream_rng(case, 8), rows * d_e, 1.0)));
        let loss = loss_node(&mut ctx, f, &clean, &draw, &schedule, &cfg).unwrap();
        let rep = grad_check(&mut ctx.g, loss, 1e-4).unwrap();
        assert!(rep.passed(), "case {case}: {:?}", rep.per_input);
        assert!(rep.per_input.contains_key(diffusion::NULL));
    }
}

#[test]
fn one_step_ddim_with_exact_noise_recovers_the_clean_point() {
    let s = DiffusionSchedule::new(1000, 1e-4, 0.02, 1).unwrap();
    let x0 = vec![0.5, -1.5, 2.0, 0.0];
    let model = Oracle { x0: x0.clone(), schedule: &s };
    let out = ddim_sample(&model, &[0.0; 4], 4, &s, 1.0, &mut stream_rng(1, 6)).unwrap();
    for (a, b) in out.iter().zip(&x0) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn guidance_endpoints_are_exact() {
    let mut rng = stream_rng(21, 0);
    for _ in 0..100 {
        let d = rng.random_range(1..10);
        let x: Vec<f64> = normal_vec(&mut rng, d, 1.0);
        let c: Vec<f64> = normal_vec(&mut rng, d, 1.0);
        let t = rng.random_range(1..=1000);
        let cond = TwoBranch.eps(&x, t, Some(&c)).unwrap();
        let uncond = TwoBranch.eps(&x, t, None).unwrap();
        assert_eq!(guided_eps(&TwoBranch, &x, t, &c, 1.0).unwrap(), cond);
        assert_eq!(guided_eps(&TwoBranch, &x, t, &c, 0.0).unwrap(), uncond);
        let s = rng.random_range(0.0..8.0);
        let mid = cfg_combine(&cond, &uncond, s);
        for i in 0..d {
            assert!((mid[i] - (uncond[i] + s * (cond[i] - uncond[i]))).abs() < 1e-12);
        }
    }
}

#[test]
fn sampler_depends_only_on_the_seed() {
    let cfg = small_heads();
    let store = head_store(&cfg, 4, 3, 30, true);
    let head = DiffusionHead { store: &store, cfg: &cfg };
    let s = DiffusionSchedule::new(1000, 1e-4, 0.02, 20).unwrap();
    let cond = [0.1, 0.2, -0.3, 0.9];
    let run = |seed| ddim_sample(&head, &cond, 3, &s, 2.0, &mut stream_rng(seed, 6)).unwrap();
    let (a, b, c) = (run(7), run(7), run(8));
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a, c);
}

#[test]
fn greedy_prefers_the_lowest_index_on_ties() {
    assert_eq!(greedy(&[0.1f32, 0.5, 0.5, -1.0]), 1);
    assert_eq!(greedy(&[2.0f64]), 0);
}

/// Two equally likely targets for the same state: a squared-error head
/// learns their mean and nothing else.
#[test]
fn regression_head_collapses_bimodal_targets_to_the_mean() {
    let (d_e, d_v) = (3, 2);
    let mut store = ParamStore::new();
    mse::init(&mut store, 16, d_e, d_v, &mut stream_rng(40, 4));
    store.set_trainable(|_| true);
    let f = Tensor::matrix(2, d_e, vec![0.3, -0.2, 1.0, 0.3, -0.2, 1.0]);
    let target = Tensor::matrix(2, d_v, vec![1.0, -2.0, -1.0, 2.0]);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        ..AdamWConfig::default()
    });
    for _ in 0..2000 {
        let mut ctx = Ctx::new(&store, true);
        let fi = ctx.constant(f.clone());
        let l = mse::loss_node(&mut ctx, fi, &target).unwrap();
        let (_, grads) = ctx.gradients(l).unwrap();
        apply_gradients(&mut store, &mut opt, &grads).unwrap();
    }
    let p: Vec<f64> = mse::mse_head_predict(&store, f.row(0)).unwrap();
    assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
}
