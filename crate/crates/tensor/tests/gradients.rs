use mixmodal_tensor::{grad_check, kernel_suite, Graph, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor64 {
    Tensor64::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_kernel_passes_finite_differences() {
    let reports = kernel_suite(11, 20, 16).unwrap();
    for r in &reports {
        assert!(r.max_rel_error < 1e-4, "{}: {:e}", r.kernel, r.max_rel_error);
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 5, 6));
    let mut h = x;
    let widths = [6, 8, 7, 3];
    for l in 0..3 {
        let w = g.param(&format!("w{l}"), random(&mut rng, widths[l], widths[l + 1]));
        let b = g.param(&format!("b{l}"), random(&mut rng, 1, widths[l + 1]));
        h = g.matmul(h, w).unwrap();
        h = g.add(h, b).unwrap();
        if l < 2 {
            h = g.gelu(h).unwrap();
        }
    }
    let target = g.constant(random(&mut rng, 5, 3));
    let loss = g.mse(h, target).unwrap();
    let report = grad_check(&mut g, loss, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn linear_layer_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 4, 5));
    let w = g.param("w", random(&mut rng, 5, 3));
    let y = g.matmul(x, w).unwrap();
    let c = g.constant(random(&mut rng, 4, 3));
    let y = g.mul(y, c).unwrap();
    let loss = g.sum(y, None).unwrap();
    let report = grad_check(&mut g, loss, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_cross_entropy_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let z = g.param("z", random(&mut rng, 6, 9));
    let loss = g.cross_entropy(z, vec![0, 3, 8, 1, 1, 4], vec![true; 6]).unwrap();
    let report = grad_check(&mut g, loss, 1e-5).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor64::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let zero = g.scale(x, 0.0).unwrap();
    let loss = g.sum(zero, None).unwrap();
    let report = grad_check(&mut g, loss, 1e-4).unwrap();
    assert_eq!(report.per_input["x"], 0.0);
    assert_eq!(report.max_abs_grad["x"], 0.0);
}

#[test]
fn empty_cross_entropy_mask_is_an_error() {
    let mut g = Graph::<f64>::new();
    let z = g.param("z", Tensor64::zeros(&[2, 3]));
    assert!(g.cross_entropy(z, vec![0, 1], vec![false, false]).is_err());
}

#[test]
fn uniform_logits_cross_entropy_is_log_vocab() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor64::zeros(&[3, 32]));
    let loss = g.cross_entropy(z, vec![0, 5, 31], vec![true; 3]).unwrap();
    assert!((g.value(loss).item() - 32f64.ln()).abs() < 1e-12);
}
