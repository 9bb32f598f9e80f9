use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Graph, NodeId};

/// Step of the five-point stencil used by [`grad_check`]. Truncation
/// error is O(h⁴), so the step can be wide enough that rounding noise in
/// the loss stays near 1e-12 without blurring sharp layer norms.
pub const FD_STEP: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per trainable input.
    pub per_input: BTreeMap<String, f64>,
    /// Largest analytic gradient magnitude seen per input.
    pub max_abs_grad: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Relative error with an absolute floor, so entries whose true value is
/// zero do not divide by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients against central finite differences for
/// every input of `graph` that requires a gradient.
///
/// Runs in 64-bit: finite differences are not meaningful in `f32`.
pub fn grad_check(graph: &mut Graph<f64>, loss: NodeId, tolerance: f64) -> Result<GradCheckReport> {
    let grads = graph.backward(loss)?;
    let mut per_input = BTreeMap::new();
    let mut max_abs_grad = BTreeMap::new();
    for name in graph.trainable_inputs() {
        let id = graph.input_id(&name).expect("trainable input is registered");
        let numel = graph.value(id).numel();
        let analytic = grads
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = graph.value(id).data()[i];
            let mut at = |k: f64| -> Result<f64> {
                graph.set_input_element(id, i, orig + k * FD_STEP)?;
                Ok(graph.value(loss).item())
            };
            let numeric = (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * FD_STEP);
            graph.set_input_element(id, i, orig)?;
            worst = worst.max(relative_error(a, numeric));
        }
        let peak = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        per_input.insert(name.clone(), worst);
        max_abs_grad.insert(name, peak);
    }
    Ok(GradCheckReport {
        per_input,
        max_abs_grad,
        tolerance,
    })
}
