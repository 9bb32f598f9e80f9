//! Classifier-free guidance and the deterministic DDIM sampler.

use rand_chacha::ChaCha8Rng;

use mixmodal_tensor::Scalar;

use crate::error::{Error, Result};
use crate::heads::schedule::DiffusionSchedule;
use crate::rng::normal_vec;

/// Anything that predicts the noise in `x_t`; `cond = None` asks for the
/// unconditional prediction.
pub trait EpsPredictor<T> {
    fn eps(&self, x_t: &[T], t: usize, cond: Option<&[T]>) -> Result<Vec<T>>;
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated as `(1−s)·ε_u + s·ε_c` so that
/// `s = 0` and `s = 1` reproduce the inputs bit for bit.
pub fn cfg_combine<T: Scalar>(cond: &[T], uncond: &[T], s: f64) -> Vec<T> {
    let s = T::lit(s);
    let r = T::one() - s;
    cond.iter().zip(uncond).map(|(&c, &u)| r * u + s * c).collect()
}

/// Guided noise estimate. At `s = 1` the unconditional branch is skipped.
pub fn guided_eps<T: Scalar, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    x_t: &[T],
    t: usize,
    cond: &[T],
    s: f64,
) -> Result<Vec<T>> {
    let c = model.eps(x_t, t, Some(cond))?;
    if s == 1.0 {
        return Ok(c);
    }
    let u = model.eps(x_t, t, None)?;
    Ok(cfg_combine(&c, &u, s))
}

/// DDIM (η = 0) from `x_T ~ N(0, I)` down the schedule's sub-sequence;
/// returns the final `x_0` estimate.
pub fn ddim_sample<T: Scalar, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    cond: &[T],
    d_v: usize,
    schedule: &DiffusionSchedule,
    s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    let mut x: Vec<T> = normal_vec(rng, d_v, 1.0);
    let steps = schedule.ddim_steps();
    for k in (0..steps.len()).rev() {
        let t = steps[k];
        let t_prev = if k == 0 { 0 } else { steps[k - 1] };
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let eps = guided_eps(model, &x, t, cond, s)?;
        if eps.len() != d_v {
            return Err(Error::Format(format!("predictor returned {} dims, expected {d_v}", eps.len())));
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x
            .iter()
            .zip(&eps)
            .map(|(&xi, &ei)| {
                let (xi, ei) = (xi.as_f64(), ei.as_f64());
                let x0 = (xi - sn * ei) / sa;
                T::lit(sa_p * x0 + sn_p * ei)
            })
            .collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { step: k });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_endpoints() {
        let c = [0.1f32, -2.0, 3.5];
        let u = [1.7f32, 0.3, -0.9];
        assert_eq!(cfg_combine(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0), u.to_vec());
        let mid = cfg_combine(&c, &u, 5.0);
        assert!((mid[0] - (1.7 + 5.0 * (0.1 - 1.7))).abs() < 1e-5);
    }
}
