use mixmodal_tensor::{Graph, Tensor32, Tensor64};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=16, 2usize..=16).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-20.0f64..20.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, data) in matrix()) {
        let mut g = Graph::new();
        let x = g.constant(Tensor64::matrix(r, c, data));
        let y = g.row_softmax(x).unwrap();
        for row in g.value(y).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_centered((r, c, data) in matrix()) {
        let mut g = Graph::new();
        let x = g.constant(Tensor64::matrix(r, c, data));
        let y = g.layer_norm(x, 1e-5).unwrap();
        for row in g.value(y).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic((r, c, data) in matrix()) {
        let run = || {
            let mut g = Graph::new();
            let x = g.param("x", Tensor32::matrix(r, c, data.iter().map(|&v| v as f32).collect()));
            let y = g.matmul_tn(x, x).unwrap();
            let y = g.layer_norm(y, 1e-5).unwrap();
            let y = g.silu(y).unwrap();
            let loss = g.mean(y, None).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(loss).clone(), grads.get(x).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert!(l1.bits_eq(&l2));
        prop_assert!(g1.bits_eq(&g2));
    }
}
