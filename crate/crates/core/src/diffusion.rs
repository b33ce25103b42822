//! Variance schedules, the closed-form forward marginal, the ancestral reverse
//! step and the timestep-aware loss weight.
//!
//! Timesteps are 1-based: `t = 1..=T`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("schedule digest mismatch: stored {stored}, recomputed {computed}")]
    DigestMismatch { stored: String, computed: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled-linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Self::Linear),
            "scaled-linear" => Some(Self::ScaledLinear),
            _ => None,
        }
    }
}

/// The parameters a schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self, DiffusionError> {
        let ScheduleParams {
            kind,
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule(
                "T must be at least 1".into(),
            ));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let beta: Vec<f64> = (0..steps)
            .map(|i| match kind {
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + (b - a) * frac(i);
                    s * s
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            params,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        Self::new(ScheduleParams {
            kind: ScheduleKind::Linear,
            steps,
            beta_start,
            beta_end,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            Err(DiffusionError::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// SHA-256 over the little-endian bytes of the beta and alpha-bar tables.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.beta.iter().chain(&self.alpha_bar) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rebuilds a schedule and checks it against a stored digest.
    pub fn restore(params: ScheduleParams, digest: &str) -> Result<Self, DiffusionError> {
        let s = Self::new(params)?;
        let computed = s.digest();
        if computed != digest {
            return Err(DiffusionError::DigestMismatch {
                stored: digest.to_string(),
                computed,
            });
        }
        Ok(s)
    }

    /// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, DiffusionError> {
        if z0.shape() != eps.shape() {
            return Err(DiffusionError::Shape(
                z0.shape().to_vec(),
                eps.shape().to_vec(),
            ));
        }
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(z, e)| a * z + b * e)
            .collect();
        Ok(Tensor::new(z0.shape().to_vec(), data).expect("shape preserved"))
    }

    /// One ancestral step `z_t -> z_{t-1}` with variance `beta_t`; the noise
    /// term is dropped at `t = 1`.
    pub fn reverse_step(
        &self,
        z_t: &Tensor,
        predicted_eps: &Tensor,
        t: usize,
        noise: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        if z_t.shape() != predicted_eps.shape() {
            return Err(DiffusionError::Shape(
                z_t.shape().to_vec(),
                predicted_eps.shape().to_vec(),
            ));
        }
        if z_t.shape() != noise.shape() {
            return Err(DiffusionError::Shape(
                z_t.shape().to_vec(),
                noise.shape().to_vec(),
            ));
        }
        let i = self.index(t)?;
        let (beta, alpha, ab) = (self.beta[i], self.alpha[i], self.alpha_bar[i]);
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let eps_coef = beta / (1.0 - ab).sqrt();
        let sigma = if t == 1 { 0.0 } else { beta.sqrt() };
        let data = z_t
            .data()
            .iter()
            .zip(predicted_eps.data())
            .zip(noise.data())
            .map(|((z, e), n)| inv_sqrt_alpha * (z - eps_coef * e) + sigma * n)
            .collect();
        Ok(Tensor::new(z_t.shape().to_vec(), data).expect("shape preserved"))
    }

    pub fn loss_weight(&self, t: usize, cfg: LossWeightConfig) -> Result<f64, DiffusionError> {
        Ok(cfg.weight(self.alpha_bar(t)?))
    }
}

/// Timestep-aware loss weight `lambda(t) = (1 - alpha_bar_t) * w1 + w2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightConfig {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeightConfig {
    fn default() -> Self {
        Self { w1: 4.5, w2: 0.5 }
    }
}

impl LossWeightConfig {
    pub fn weight(self, alpha_bar: f64) -> f64 {
        (1.0 - alpha_bar) * self.w1 + self.w2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn single_step_schedule() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = NoiseSchedule::new(ScheduleParams {
                kind,
                steps: 1,
                beta_start: 0.3,
                beta_end: 0.3,
            })
            .unwrap();
            assert!((s.alpha_bar(1).unwrap() - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_default_terminal_alpha_bar() {
        // Independent product loop: prod_{i<1000} (1 - (1e-4 + (0.02 - 1e-4) i / 999)).
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let last = s.alpha_bar(1000).unwrap();
        assert!((last - prod).abs() < 1e-15);
        assert!(last < 5e-5, "{last}");
    }

    #[test]
    fn rejects_invalid_bounds() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_special_cases() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.2).unwrap();
        let z0 = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let eps = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());
        let ab = s.alpha_bar(4).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        assert_eq!(s.q_sample(&z0, 4, &zero).unwrap(), z0.scale(ab.sqrt()));
        assert_eq!(
            s.q_sample(&zero, 4, &eps).unwrap(),
            eps.scale((1.0 - ab).sqrt())
        );
        assert!(matches!(
            s.q_sample(&z0, 11, &eps),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));
        assert!(s.q_sample(&z0, 0, &eps).is_err());

        let tiny = NoiseSchedule::linear(3, 1e-12, 1e-12).unwrap();
        let out = tiny.q_sample(&z0, 1, &eps).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn reverse_step_inverts_first_step() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let z0 = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).sin());
        let eps = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
        let z1 = s.q_sample(&z0, 1, &eps).unwrap();
        let noise = Tensor::from_fn(&[4, 2], |i| i as f64);
        let back = s.reverse_step(&z1, &eps, 1, &noise).unwrap();
        assert!(back.max_abs_diff(&z0) < 1e-10);
    }

    #[test]
    fn reverse_step_special_cases() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let z = Tensor::from_fn(&[3], |i| i as f64 + 1.0);
        let zero = Tensor::zeros(&[3]);
        let out = s.reverse_step(&z, &zero, 5, &zero).unwrap();
        assert_eq!(out, z.scale(1.0 / s.alpha(5).unwrap().sqrt()));

        let tiny = NoiseSchedule::linear(4, 1e-12, 1e-12).unwrap();
        let eps = Tensor::from_fn(&[3], |i| i as f64);
        let out = tiny.reverse_step(&z, &eps, 3, &zero).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-5);
        assert!(tiny.reverse_step(&z, &eps, 5, &zero).is_err());
    }

    #[test]
    fn loss_weight_values() {
        let cfg = LossWeightConfig::default();
        assert_eq!(cfg.weight(1.0), 0.5);
        assert_eq!(cfg.weight(0.0), 5.0);
        assert_eq!(cfg.weight(0.5), 2.75);
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let mut prev = 0.0;
        for t in 1..=50 {
            let w = s.loss_weight(t, cfg).unwrap();
            assert!((0.5..=5.0).contains(&w) && w >= prev);
            prev = w;
        }
    }

    #[test]
    fn digest_round_trip() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let d = s.digest();
        assert_eq!(NoiseSchedule::restore(s.params(), &d).unwrap(), s);
        assert!(NoiseSchedule::restore(s.params(), "00").is_err());
    }
}
