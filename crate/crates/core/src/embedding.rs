//! Vision and text input embeddings.
//!
//! Three ways to turn a patch feature `v` into a backbone input:
//! hard (nearest code, then that code's embedding row), soft (a
//! softmax over negative squared distances mixes the embedding rows) and
//! linear (a plain projection, used for the ablation).

use mixmodal_tensor::{Graph, NodeId, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Nearest code by squared Euclidean distance; ties go to the lowest index.
pub fn quantize_hard<T: Scalar>(v: &[T], codes: &Tensor<T>) -> Result<usize> {
    if codes.numel() == 0 {
        return Err(Error::EmptyCodebook);
    }
    if codes.cols() != v.len() {
        return Err(Error::Format(format!(
            "feature has {} dims, codebook has {}",
            v.len(),
            codes.cols()
        )));
    }
    let mut best = (0, T::infinity());
    for j in 0..codes.rows() {
        let d: T = codes.row(j).iter().zip(v).map(|(&c, &x)| (x - c) * (x - c)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best.0)
}

/// Code vectors `c_j`, their embedding rows `w_j`, and the temperature
/// of the soft path.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    codes: Tensor<T>,
    weights: Tensor<T>,
    temperature: f64,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(codes: Tensor<T>, weights: Tensor<T>, temperature: f64) -> Result<Self> {
        if codes.shape().len() != 2 || weights.shape().len() != 2 || codes.rows() != weights.rows() {
            return Err(Error::Format(format!(
                "codes {:?} and weights {:?} must be K × d_v and K × d_e",
                codes.shape(),
                weights.shape()
            )));
        }
        if !codes.all_finite() || !weights.all_finite() {
            return Err(Error::Format("non-finite codebook row".into()));
        }
        Ok(Self {
            codes,
            weights,
            temperature,
        })
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn quantize(&self, v: &[T]) -> Result<usize> {
        quantize_hard(v, &self.codes)
    }

    pub fn embed_hard(&self, index: usize) -> Result<Vec<T>> {
        if index >= self.size() {
            return Err(Error::CodeOutOfRange {
                index,
                size: self.size(),
            });
        }
        Ok(self.weights.row(index).to_vec())
    }

    pub fn embed_soft(&self, v: &[T]) -> Result<Vec<T>> {
        check_temperature(self.temperature)?;
        if v.len() != self.codes.cols() {
            return Err(Error::Format(format!("feature has {} dims, codebook has {}", v.len(), self.codes.cols())));
        }
        let mut g = Graph::new();
        let vn = g.constant(Tensor::matrix(1, v.len(), v.to_vec()));
        let cn = g.constant(self.codes.clone());
        let wn = g.constant(self.weights.clone());
        let h = soft_embed(&mut g, vn, cn, wn, self.temperature)?;
        Ok(g.value(h).data().to_vec())
    }
}

pub fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// Row-batched soft embedding: `softmax(−‖v − c_j‖²/τ)·W` for each row of
/// `v` (`B × d_v`), codes `c` (`K × d_v`) and weights `w` (`K × d_e`).
///
/// The `‖v‖²` term is constant along each row and cancels in the softmax,
/// so only `2v·c − ‖c‖²` is formed.
pub fn soft_embed<T: Scalar>(g: &mut Graph<T>, v: NodeId, codes: NodeId, w: NodeId, tau: f64) -> Result<NodeId> {
    check_temperature(tau)?;
    let d_v = g.value(codes).cols();
    let cross = g.matmul_nt(v, codes)?;
    let cross = g.scale(cross, 2.0)?;
    let sq = g.mul(codes, codes)?;
    let ones = g.constant(Tensor::ones(&[1, d_v]));
    let norms = g.matmul_nt(ones, sq)?;
    let logits = g.sub(cross, norms)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let p = g.row_softmax(logits)?;
    Ok(g.matmul(p, w)?)
}

/// Hard embedding of row-batched features. The nearest-code search runs
/// outside the graph, so no gradient reaches `v` or the codes.
pub fn hard_embed<T: Scalar>(g: &mut Graph<T>, v: &Tensor<T>, codes: &Tensor<T>, w: NodeId) -> Result<NodeId> {
    let idx = (0..v.rows()).map(|r| quantize_hard(v.row(r), codes)).collect::<Result<Vec<_>>>()?;
    Ok(g.gather(w, idx)?)
}

/// `h = W·v` per row, with `W` stored `d_e × d_v`.
pub fn linear_embed<T: Scalar>(g: &mut Graph<T>, v: NodeId, w: NodeId) -> Result<NodeId> {
    Ok(g.matmul_nt(v, w)?)
}

pub fn embed_linear<T: Scalar>(v: &[T], w: &Tensor<T>) -> Result<Vec<T>> {
    if w.cols() != v.len() {
        return Err(Error::Format(format!("projection expects {} dims, got {}", w.cols(), v.len())));
    }
    let out = w.matmul(&Tensor::matrix(v.len(), 1, v.to_vec()))?;
    Ok(out.into_data())
}

pub fn check_tokens(ids: &[TokenId], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

pub fn embed_text<T: Scalar>(id: TokenId, table: &Tensor<T>) -> Result<Vec<T>> {
    check_tokens(&[id], table.rows())?;
    Ok(table.row(id).to_vec())
}

/// Batched token lookup as a graph node.
pub fn text_embed<T: Scalar>(g: &mut Graph<T>, table: NodeId, ids: &[TokenId]) -> Result<NodeId> {
    check_tokens(ids, g.value(table).rows())?;
    Ok(g.gather(table, ids.to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb() -> Codebook<f64> {
        let codes = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        let w = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        Codebook::new(codes, w, 1.0).unwrap()
    }

    #[test]
    fn exact_match_and_tie() {
        let c = cb();
        assert_eq!(c.quantize(&[1.0, 0.0]).unwrap(), 1);
        assert_eq!(c.quantize(&[0.5, 0.0]).unwrap(), 0);
    }

    #[test]
    fn hand_softmax_oracle() {
        let c = cb();
        let v = [0.5f64, 0.5];
        let d: Vec<f64> = [[0.0f64, 0.0], [1.0, 0.0], [0.0, 2.0]]
            .iter()
            .map(|c| (v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2))
            .collect();
        let e: Vec<f64> = d.iter().map(|x| (-x).exp()).collect();
        let z: f64 = e.iter().sum();
        let want = [(e[0] - e[2]) / z, (e[1] - e[2]) / z];
        let got = c.embed_soft(&v).unwrap();
        for k in 0..2 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_temperature_and_index() {
        let c = cb().with_temperature(0.0);
        assert!(matches!(c.embed_soft(&[0.0, 0.0]), Err(Error::InvalidTemperature(_))));
        assert!(matches!(c.embed_hard(3), Err(Error::CodeOutOfRange { .. })));
        assert!(matches!(
            quantize_hard::<f32>(&[], &Tensor::zeros(&[1, 1])),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn text_lookup_range() {
        let t = Tensor::<f32>::from_fn(&[4, 2], |i| i as f32);
        assert_eq!(embed_text(0, &t).unwrap(), vec![0.0, 1.0]);
        assert!(embed_text(4, &t).is_err());
    }
}
