//! Variance schedule and the closed-form forward / deterministic reverse steps
//! of the prior-vector diffusion chain.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π_{i≤t} α_i` for `t = 1..=T`
/// (index `t − 1` in the vectors). Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` points.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} .. {beta_end}"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_end]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Builds from an explicit, strictly increasing table in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("betas must be strictly increasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimeStep { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    /// Closed-form marginal: `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · noise`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let i = self.check(t)?;
        same_shape(z0, noise)?;
        let ab = self.alpha_bar[i];
        Ok(((z0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
    }

    /// One forward transition: `z_t = √(1 − β_t) · z_{t−1} + √β_t · noise`.
    pub fn forward_step(&self, z_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let i = self.check(t)?;
        same_shape(z_prev, noise)?;
        let b = self.beta[i];
        Ok(((z_prev * (1.0 - b).sqrt())? + (noise * b.sqrt())?)?)
    }

    /// Deterministic reverse transition
    /// `ẑ_{t−1} = (ẑ_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t`.
    pub fn reverse_step(&self, z_t: &Tensor, t: usize, predicted_noise: &Tensor) -> Result<Tensor> {
        let i = self.check(t)?;
        same_shape(z_t, predicted_noise)?;
        let a = self.alpha[i];
        let coef = (1.0 - a) / (1.0 - self.alpha_bar[i]).sqrt();
        Ok(((z_t - (predicted_noise * coef)?)? / a.sqrt())?)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn default_schedule_values() {
        let s = make_schedule(4, 0.10, 0.99).unwrap();
        let want_beta = [0.10, 0.396_666_666_666_666_7, 0.693_333_333_333_333_3, 0.99];
        for (b, w) in s.beta().iter().zip(want_beta) {
            assert!((b - w).abs() < 1e-12);
        }
        // direct multiplication
        let ab4 = 0.9 * (1.0 - want_beta[1]) * (1.0 - want_beta[2]) * 0.01;
        assert!((s.alpha_bar()[3] - ab4).abs() < 1e-15);
        assert!((s.alpha_bar()[1] - 0.543).abs() < 1e-12);
        assert!((s.alpha_bar()[2] - 0.166_52).abs() < 1e-12);
        assert!((s.alpha_bar()[3] - 0.001_665_2).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.10, 0.99).unwrap();
        assert_eq!(s.beta(), &[0.99]);
        assert!((s.alpha_bar()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(0, 0.1, 0.9).is_err());
        assert!(make_schedule(4, 0.5, 0.4).is_err());
        assert!(make_schedule(4, 0.0, 0.4).is_err());
        assert!(make_schedule(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.2]).is_err());
    }

    #[test]
    fn time_step_bounds() {
        let s = make_schedule(4, 0.1, 0.99).unwrap();
        let z = Tensor::zeros(3, candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(s.forward_diffuse(&z, 0, &z), Err(Error::TimeStep { t: 0, max: 4 })));
        assert!(s.reverse_step(&z, 5, &z).is_err());
        assert!(s.reverse_step(&z, 4, &z).is_ok());
    }

    #[test]
    fn zero_noise_cases() {
        let s = make_schedule(4, 0.1, 0.99).unwrap();
        let z0 = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let zero = z0.zeros_like().unwrap();
        let zt: Vec<f64> = s.forward_diffuse(&z0, 4, &zero).unwrap().to_vec1().unwrap();
        let c = s.alpha_bar()[3].sqrt();
        assert!((c - 0.040_807).abs() < 1e-6);
        assert_eq!(zt, vec![c, -2.0 * c, 0.5 * c]);

        let back: Vec<f64> = s.reverse_step(&z0, 3, &zero).unwrap().to_vec1().unwrap();
        let a = s.alpha()[2].sqrt();
        for (b, z) in back.iter().zip([1.0, -2.0, 0.5]) {
            assert!((b - z / a).abs() < 1e-15);
        }
    }
}
