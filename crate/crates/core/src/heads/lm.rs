use rand_chacha::ChaCha8Rng;

use mixmodal_tensor::{NodeId, ParamStore, Scalar, Tensor};

use crate::error::Result;
use crate::nn::{gaussian_tensor, Ctx};
use crate::vocab::TokenId;

pub const GROUP: &str = "lm_head";
pub const WEIGHT: &str = "lm.w";

pub fn init<T: Scalar>(store: &mut ParamStore<T>, vocab: usize, d_e: usize, std: f64, rng: &mut ChaCha8Rng) {
    store.insert(WEIGHT, GROUP, gaussian_tensor(rng, &[vocab, d_e], std));
}

/// `f·Wᵀ` for row-batched states; `W` is stored `vocab × d_e`.
pub fn logits_node<T: Scalar>(ctx: &mut Ctx<'_, T>, f: NodeId) -> Result<NodeId> {
    let w = ctx.p(WEIGHT)?;
    Ok(ctx.g.matmul_nt(f, w)?)
}

pub fn lm_logits<T: Scalar>(store: &ParamStore<T>, f: &[T]) -> Result<Vec<T>> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.constant(Tensor::matrix(1, f.len(), f.to_vec()));
    let l = logits_node(&mut ctx, x)?;
    Ok(ctx.value(l).data().to_vec())
}

/// Argmax with the lowest index winning ties.
pub fn greedy<T: Scalar>(logits: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pick_lowest() {
        assert_eq!(greedy(&[0.0f32; 32]), 0);
        assert_eq!(greedy(&[1.0f32, 3.0, 3.0]), 1);
    }
}
