//! Binding of stored parameters into a recording graph, plus the few
//! layer helpers every module shares.

use std::collections::BTreeMap;

use mixmodal_tensor::{AdamW, Graph, NodeId, ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type NamedGrads<T> = Vec<(String, Tensor<T>)>;

/// One forward (and optionally backward) pass over a parameter store.
///
/// Parameters enter the graph lazily, the first time they are used.
/// They require gradients only when the context tracks gradients and
/// the parameter's group is marked trainable.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
    track_grads: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, track_grads: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            track_grads,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let param = self.store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let rg = self.track_grads && param.trainable;
        let id = self.g.input(name, param.tensor.clone().with_requires_grad(rg));
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.g.constant(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.g.value(id)
    }

    /// `x·W (+ b)` with `W` stored as `in × out`.
    pub fn linear(&mut self, x: NodeId, w: &str, b: Option<&str>) -> Result<NodeId> {
        let wn = self.p(w)?;
        let y = self.g.matmul(x, wn)?;
        match b {
            Some(b) => {
                let bn = self.p(b)?;
                Ok(self.g.add(y, bn)?)
            }
            None => Ok(y),
        }
    }

    /// Layer norm followed by a learned gain and bias.
    pub fn layer_norm_affine(&mut self, x: NodeId, gain: &str, bias: &str, eps: f64) -> Result<NodeId> {
        let y = self.g.layer_norm(x, eps)?;
        let gn = self.p(gain)?;
        let bn = self.p(bias)?;
        let y = self.g.mul(y, gn)?;
        Ok(self.g.add(y, bn)?)
    }

    pub fn was_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Runs the backward pass and returns the scalar loss together with
    /// the gradient of every bound trainable parameter.
    pub fn gradients(self, loss: NodeId) -> Result<(f64, NamedGrads<T>)> {
        let value = self.g.value(loss).item().as_f64();
        let mut grads = self.g.backward(loss)?;
        let mut out = Vec::new();
        for (name, id) in self.bound {
            if let Some(g) = grads.take(id) {
                out.push((name, g));
            }
        }
        Ok((value, out))
    }
}

/// Applies an optimizer step to the named parameters of `store`.
pub fn apply_gradients<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    grads: &[(String, Tensor<T>)],
) -> Result<()> {
    let wanted: BTreeMap<&str, &Tensor<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let updates = store
        .iter_mut()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(name, p)| wanted.get(name).map(|g| (name, &mut p.tensor, *g)));
    opt.step(updates)?;
    Ok(())
}

pub fn gaussian_tensor<T: Scalar>(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), crate::rng::normal_vec(rng, n, std)).expect("positive shape")
}
