//! Deterministic regression head for the mode-collapse ablation: an MLP
//! from the backbone state straight to the next patch.

use rand_chacha::ChaCha8Rng;

use mixmodal_tensor::{NodeId, ParamStore, Scalar, Tensor};

use crate::error::Result;
use crate::nn::{gaussian_tensor, Ctx};

pub const GROUP: &str = "mse_head";

pub fn init<T: Scalar>(store: &mut ParamStore<T>, width: usize, d_e: usize, d_v: usize, rng: &mut ChaCha8Rng) {
    let s = |n: usize| 1.0 / (n as f64).sqrt();
    store.insert("mse.fc1.w", GROUP, gaussian_tensor(rng, &[d_e, width], s(d_e)));
    store.insert("mse.fc1.b", GROUP, Tensor::zeros(&[1, width]));
    store.insert("mse.fc2.w", GROUP, gaussian_tensor(rng, &[width, width], s(width)));
    store.insert("mse.fc2.b", GROUP, Tensor::zeros(&[1, width]));
    store.insert("mse.out.w", GROUP, gaussian_tensor(rng, &[width, d_v], s(width)));
    store.insert("mse.out.b", GROUP, Tensor::zeros(&[1, d_v]));
}

pub fn predict_node<T: Scalar>(ctx: &mut Ctx<'_, T>, f: NodeId) -> Result<NodeId> {
    let h = ctx.linear(f, "mse.fc1.w", Some("mse.fc1.b"))?;
    let h = ctx.g.silu(h)?;
    let h = ctx.linear(h, "mse.fc2.w", Some("mse.fc2.b"))?;
    let h = ctx.g.silu(h)?;
    ctx.linear(h, "mse.out.w", Some("mse.out.b"))
}

/// `‖v̂ − v‖²` per patch, averaged over rows.
pub fn loss_node<T: Scalar>(ctx: &mut Ctx<'_, T>, f: NodeId, target: &Tensor<T>) -> Result<NodeId> {
    let pred = predict_node(ctx, f)?;
    let t = ctx.constant(target.clone());
    let l = ctx.g.mse(pred, t)?;
    Ok(ctx.g.scale(l, target.cols() as f64)?)
}

pub fn mse_head_predict<T: Scalar>(store: &ParamStore<T>, f: &[T]) -> Result<Vec<T>> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.constant(Tensor::matrix(1, f.len(), f.to_vec()));
    let p = predict_node(&mut ctx, x)?;
    Ok(ctx.value(p).data().to_vec())
}
