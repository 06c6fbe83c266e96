//! Variance-preserving noise schedules and the forward corruption process
//! `z_t = alpha_t * z_0 + sigma_t * eta`.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{device, LatentTensor};

/// Per-step beta values are clipped here so that alpha never reaches zero.
const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Cosine,
    Linear,
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleFamily::Cosine => f.write_str("cosine"),
            ScheduleFamily::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleFamily::Cosine),
            "linear" => Ok(ScheduleFamily::Linear),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule family `{other}` (expected cosine or linear)"
            ))),
        }
    }
}

/// Serializable description of a schedule; stored in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub family: ScheduleFamily,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            family: ScheduleFamily::Cosine,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.family)
    }
}

/// Diffusion control parameters over `steps + 1` indices, `t = 0` being the
/// clean boundary. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    weight: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, family: ScheduleFamily) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = match family {
            ScheduleFamily::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA))
                    .collect()
            }
            ScheduleFamily::Linear => {
                // Endpoints rescaled so that the total corruption is comparable
                // for any number of steps.
                let scale = 1000.0 / steps as f64;
                let (start, end) = (LINEAR_BETA_START * scale, LINEAR_BETA_END * scale);
                (1..=steps)
                    .map(|t| {
                        let frac = if steps == 1 {
                            1.0
                        } else {
                            (t - 1) as f64 / (steps - 1) as f64
                        };
                        (start + (end - start) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for beta in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - beta));
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            steps,
            alpha,
            sigma,
            weight: vec![1.0; steps + 1],
        })
    }

    /// Builds a schedule from explicit alpha values; sigma follows from
    /// variance preservation. Weights default to 1.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidConfig(
                "alpha needs entries for t = 0..T with T >= 1".into(),
            ));
        }
        if alpha[0] != 1.0 {
            return Err(Error::InvalidConfig("alpha[0] must be 1".into()));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig("alpha values must lie in [0, 1]".into()));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig("alpha must be non-increasing".into()));
        }
        let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        let steps = alpha.len() - 1;
        Ok(Self {
            steps,
            alpha,
            sigma,
            weight: vec![1.0; steps + 1],
        })
    }

    /// Replaces the per-step loss weights.
    pub fn with_weights(mut self, weight: Vec<f64>) -> Result<Self> {
        if weight.len() != self.steps + 1 {
            return Err(Error::InvalidConfig(format!(
                "expected {} weights, got {}",
                self.steps + 1,
                weight.len()
            )));
        }
        if weight.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig("weights must be positive and finite".into()));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weight[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::Range(format!(
                "timestep {t} outside 0..={}",
                self.steps
            )))
        } else {
            Ok(())
        }
    }

    /// `alpha[t] * x0 + sigma[t] * noise`, elementwise.
    pub fn forward_diffuse(
        &self,
        x0: &LatentTensor,
        t: usize,
        noise: &LatentTensor,
    ) -> Result<LatentTensor> {
        if x0.dims() != noise.dims() {
            return Err(Error::Shape(format!(
                "x0 {:?} and noise {:?} differ",
                x0.dims(),
                noise.dims()
            )));
        }
        self.check_timestep(t)?;
        let z = ((x0.tensor() * self.alpha[t])? + (noise.tensor() * self.sigma[t])?)?;
        LatentTensor::new(z)
    }

    /// Draws a timestep uniformly from `1..=T`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps)
    }

    /// Per-example `(alpha, sigma)` as `(B, 1, 1, 1)` tensors for batched use.
    pub(crate) fn coefficient_tensors(&self, ts: &[usize]) -> Result<(Tensor, Tensor)> {
        for &t in ts {
            self.check_timestep(t)?;
        }
        let n = ts.len();
        let a: Vec<f64> = ts.iter().map(|&t| self.alpha[t]).collect();
        let s: Vec<f64> = ts.iter().map(|&t| self.sigma[t]).collect();
        Ok((
            Tensor::from_vec(a, (n, 1, 1, 1), &device())?,
            Tensor::from_vec(s, (n, 1, 1, 1), &device())?,
        ))
    }

    /// Batched forward process over `(B, C, h, w)` tensors with one timestep
    /// per example.
    pub(crate) fn diffuse_batch(&self, z0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        if z0.dims() != noise.dims() {
            return Err(Error::Shape(format!(
                "z0 {:?} and noise {:?} differ",
                z0.dims(),
                noise.dims()
            )));
        }
        let (a, s) = self.coefficient_tensors(ts)?;
        Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_steps_is_invalid() {
        assert!(matches!(
            NoiseSchedule::build(0, ScheduleFamily::Cosine),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn unknown_family_is_invalid() {
        assert!(matches!(
            "sigmoid".parse::<ScheduleFamily>(),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn cosine_boundary_is_clean() {
        let s = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.alpha(1000) > 0.0);
    }

    #[test]
    fn linear_four_steps_strictly_decreasing() {
        let s = NoiseSchedule::build(4, ScheduleFamily::Linear).unwrap();
        for t in 0..4 {
            assert!(s.alpha(t + 1) < s.alpha(t), "t={t}");
        }
    }

    #[test]
    fn variance_preserved_everywhere() {
        for family in [ScheduleFamily::Cosine, ScheduleFamily::Linear] {
            for steps in [1, 4, 100, 1000] {
                let s = NoiseSchedule::build(steps, family).unwrap();
                for t in 0..=steps {
                    let v = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                    assert!((v - 1.0).abs() < 1e-12, "{family} T={steps} t={t}");
                    assert!(s.weight(t) > 0.0);
                }
                for t in 0..steps {
                    assert!(s.alpha(t + 1) <= s.alpha(t));
                    assert!(s.sigma(t + 1) >= s.sigma(t));
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = NoiseSchedule::build(250, ScheduleFamily::Cosine).unwrap();
        let b = NoiseSchedule::build(250, ScheduleFamily::Cosine).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_diffuse_hand_value() {
        // alpha = 0.8, sigma = 0.6 at t = 1.
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.8]).unwrap();
        assert!((s.sigma(1) - 0.6).abs() < 1e-15);
        let x0 = LatentTensor::full(1.0, (1, 1, 1)).unwrap();
        let noise = LatentTensor::full(0.5, (1, 1, 1)).unwrap();
        let z = s.forward_diffuse(&x0, 1, &noise).unwrap().to_vec().unwrap();
        assert!((z[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn forward_diffuse_identity_at_zero_and_zero_noise() {
        let s = NoiseSchedule::build(10, ScheduleFamily::Cosine).unwrap();
        let x0 = LatentTensor::full(1.0, (4, 2, 2)).unwrap();
        let noise = LatentTensor::from_vec((0..16).map(|i| i as f64 - 7.0).collect(), (4, 2, 2)).unwrap();
        let z = s.forward_diffuse(&x0, 0, &noise).unwrap();
        assert_eq!(z.to_vec().unwrap(), x0.to_vec().unwrap());

        let zero = LatentTensor::full(0.0, (4, 2, 2)).unwrap();
        let z = s.forward_diffuse(&x0, 7, &zero).unwrap().to_vec().unwrap();
        assert!(z.iter().all(|v| (*v - s.alpha(7)).abs() < 1e-15));
    }

    #[test]
    fn forward_diffuse_errors() {
        let s = NoiseSchedule::build(10, ScheduleFamily::Cosine).unwrap();
        let a = LatentTensor::full(1.0, (4, 2, 2)).unwrap();
        let b = LatentTensor::full(1.0, (4, 2, 3)).unwrap();
        assert!(matches!(s.forward_diffuse(&a, 1, &b), Err(Error::Shape(_))));
        assert!(matches!(s.forward_diffuse(&a, 11, &a), Err(Error::Range(_))));
    }

    #[test]
    fn single_step_schedule_always_samples_one() {
        let s = NoiseSchedule::build(1, ScheduleFamily::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| s.sample_timestep(&mut rng) == 1));
    }

    #[test]
    fn timestep_sampling_is_reproducible() {
        let s = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| s.sample_timestep(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn timestep_frequencies_are_uniform() {
        let s = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        let mut counts = vec![0usize; 1001];
        for _ in 0..draws {
            counts[s.sample_timestep(&mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 1000.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for (t, &c) in counts.iter().enumerate().skip(1) {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "t={t} count={c}");
        }
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - mean).powi(2) / mean)
            .sum();
        // 999 degrees of freedom; mean 999, sd ~44.7.
        assert!(chi2 < 999.0 + 5.0 * 44.7, "chi2={chi2}");
    }
}
