use crate::error::{Error, Result};

/// Linear β schedule over `T` training steps with a DDIM sub-sequence.
/// Steps are 1-based; `alpha_bar(0)` is 1 (no noise).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ddim: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, ddim_steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("at least one training step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if ddim_steps == 0 || ddim_steps > steps {
            return Err(Error::Schedule(format!("{ddim_steps} sampling steps for {steps} training steps")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        // Evenly spaced over [1, T], ending exactly at T.
        let ddim = (1..=ddim_steps)
            .map(|k| ((k * steps) as f64 / ddim_steps as f64).round() as usize)
            .collect();
        Ok(Self {
            betas,
            alpha_bars,
            ddim,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_ranges() {
        assert!(DiffusionSchedule::new(1000, 0.02, 1e-4, 100).is_err());
        assert!(DiffusionSchedule::new(1000, 0.0, 0.02, 100).is_err());
        assert!(DiffusionSchedule::new(1000, 1e-4, 1.0, 100).is_err());
        assert!(DiffusionSchedule::new(10, 1e-4, 0.02, 11).is_err());
    }

    #[test]
    fn ddim_grid() {
        let s = DiffusionSchedule::new(1000, 1e-4, 0.02, 100).unwrap();
        assert_eq!(s.ddim_steps()[0], 10);
        assert_eq!(*s.ddim_steps().last().unwrap(), 1000);
        assert!(s.ddim_steps().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar(1001).is_err());
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }
}
