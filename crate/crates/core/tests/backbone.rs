use mixmodal_core::backbone::{init, states};
use mixmodal_core::config::BackboneConfig;
use mixmodal_core::rng::{normal_vec, stream_rng};
use mixmodal_core::Error;
use mixmodal_tensor::{gelu, ParamStore, Tensor};

fn config(layers: usize, width: usize, heads: usize) -> BackboneConfig {
    BackboneConfig {
        layers,
        width,
        heads,
        mlp_ratio: 2,
        max_len: 16,
        ..BackboneConfig::default()
    }
}

fn store(cfg: &BackboneConfig, seed: u64, std: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init(&mut s, &BackboneConfig { init_std: std, ..cfg.clone() }, &mut stream_rng(seed, 4));
    s
}

fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

fn vec_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols()).map(|c| x.iter().enumerate().map(|(r, v)| v * w.at(r, c)).sum()).collect()
}

#[test]
fn later_positions_never_change_earlier_states() {
    let cfg = config(2, 8, 2);
    let s = store(&cfg, 1, 0.3);
    let mut rng = stream_rng(2, 0);
    let n = 7;
    let x = Tensor::matrix(n, 8, normal_vec(&mut rng, n * 8, 1.0));
    let base = states(&s, x.clone(), &cfg).unwrap();
    for j in 1..n {
        let mut y = x.clone();
        for v in y.row_mut(j) {
            *v += 3.0;
        }
        let out = states(&s, y, &cfg).unwrap();
        for i in 0..j {
            assert_eq!(out.row(i), base.row(i), "row {i} moved when row {j} changed");
        }
        assert_ne!(out.row(j), base.row(j));
    }
}

#[test]
fn zero_layers_is_the_final_norm() {
    let cfg = config(0, 6, 2);
    let s = store(&cfg, 3, 0.02);
    let x = Tensor::matrix(3, 6, normal_vec(&mut stream_rng(4, 0), 18, 2.0));
    let out = states(&s, x.clone(), &cfg).unwrap();
    for r in 0..3 {
        let want = layer_norm(x.row(r), cfg.norm_eps);
        for (a, b) in out.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// One block on a single position: attention over one key is the value
/// itself and the rotation at position 0 is the identity, so the block
/// reduces to two residual MLPs that can be written out by hand.
#[test]
fn single_position_block_matches_hand_computation() {
    let cfg = config(1, 4, 2);
    let s = store(&cfg, 5, 0.5);
    let x = vec![0.3, -1.2, 0.8, 2.0];
    let t = |n: &str| s.tensor(n).unwrap();
    let n1 = layer_norm(&x, cfg.norm_eps);
    let v = vec_mat(&n1, t("blk0.attn.wv"));
    let a = vec_mat(&v, t("blk0.attn.wo"));
    let h: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
    let n2 = layer_norm(&h, cfg.norm_eps);
    let m: Vec<f64> = vec_mat(&n2, t("blk0.mlp.w1")).into_iter().map(gelu).collect();
    let m = vec_mat(&m, t("blk0.mlp.w2"));
    let h: Vec<f64> = h.iter().zip(&m).map(|(p, q)| p + q).collect();
    let want = layer_norm(&h, cfg.norm_eps);
    let got = states(&s, Tensor::matrix(1, 4, x), &cfg).unwrap();
    for (a, b) in got.row(0).iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn too_long_and_non_finite_inputs_are_rejected() {
    let cfg = config(1, 4, 1);
    let s = store(&cfg, 6, 0.02);
    let long = Tensor::zeros(&[17, 4]);
    assert!(matches!(states(&s, long, &cfg), Err(Error::SequenceTooLong { len: 17, max: 16 })));
    let mut bad = Tensor::zeros(&[2, 4]);
    bad.data_mut()[5] = f64::NAN;
    assert!(matches!(states(&s, bad, &cfg), Err(Error::NonFiniteActivation { layer: 0 })));
}
