use mixmodal_tensor::{AdamW, AdamWConfig, Tensor32, Tensor64, TensorError};

#[test]
fn zero_gradient_without_decay_is_identity() {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut p = Tensor32::matrix(1, 3, vec![0.5, -1.0, 2.0]);
    let before = p.clone();
    let g = Tensor32::zeros(&[1, 3]);
    for _ in 0..3 {
        opt.step([("p", &mut p, &g)]).unwrap();
    }
    assert!(p.bits_eq(&before));
}

#[test]
fn single_step_matches_hand_computation() {
    // m = 0.1, v = 0.01; bias-corrected m̂ = 1, v̂ = 1.
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut opt = AdamW::new(cfg);
    let mut p = Tensor64::scalar(1.0);
    let g = Tensor64::scalar(1.0);
    opt.step([("p", &mut p, &g)]).unwrap();
    let expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!((p.item() - expected).abs() < 1e-12, "{} vs {expected}", p.item());
    assert_eq!(opt.step_count(), 1);
    let m = &opt.moments()["p"];
    assert!((m.m.item() - 0.1).abs() < 1e-15);
    assert!((m.v.item() - 0.01).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_is_identity() {
    let cfg = AdamWConfig {
        lr: 0.0,
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg);
    let mut p = Tensor32::matrix(2, 2, vec![1.0, -3.0, 0.25, 7.0]);
    let before = p.clone();
    let g = Tensor32::matrix(2, 2, vec![0.3, -0.2, 5.0, 1.0]);
    opt.step([("p", &mut p, &g)]).unwrap();
    assert!(p.bits_eq(&before));
}

#[test]
fn default_betas() {
    let c = AdamWConfig::default();
    assert_eq!((c.beta1, c.beta2), (0.9, 0.99));
}

#[test]
fn nan_gradient_aborts_without_mutation() {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut p = Tensor32::matrix(1, 2, vec![1.0, 2.0]);
    let mut q = Tensor32::matrix(1, 1, vec![3.0]);
    let gp = Tensor32::matrix(1, 2, vec![0.1, 0.1]);
    let gq = Tensor32::matrix(1, 1, vec![f32::NAN]);
    let err = opt.step([("p", &mut p, &gp), ("q", &mut q, &gq)]).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite(_)));
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn step_counter_increments_by_one() {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut p = Tensor32::scalar(1.0);
    let g = Tensor32::scalar(0.5);
    for t in 1..=5 {
        opt.step([("p", &mut p, &g)]).unwrap();
        assert_eq!(opt.step_count(), t);
    }
}
