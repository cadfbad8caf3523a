//! Denoiser preconditioning, the staged lognormal noise schedule, the loss
//! weighting, and a deterministic first-order Euler sampler.
//!
//! The denoiser contract is `D(x; σ) = c_skip·x + c_out·F(c_in·x; c_noise)`,
//! with the scaling functions keeping the inner network's input/target at
//! unit variance across noise levels.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Fixed data scale and the active lognormal parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioner {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Preconditioner {
            sigma_data: 1.0,
            p_mean: 1.0,
            p_std: 1.6,
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

impl Preconditioner {
    pub fn new(sigma_data: f64, p_mean: f64, p_std: f64) -> Result<Self> {
        if sigma_data <= 0.0 || p_std <= 0.0 {
            return Err(Error::Config("sigma_data and p_std must be positive".into()));
        }
        Ok(Preconditioner {
            sigma_data,
            p_mean,
            p_std,
        })
    }

    pub fn c_skip(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        let sd2 = self.sigma_data * self.sigma_data;
        Ok(sd2 / (sigma * sigma + sd2))
    }

    pub fn c_out(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        let sd2 = self.sigma_data * self.sigma_data;
        Ok(sigma * self.sigma_data / (sigma * sigma + sd2).sqrt())
    }

    pub fn c_in(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        let sd2 = self.sigma_data * self.sigma_data;
        Ok(1.0 / (sigma * sigma + sd2).sqrt())
    }

    pub fn c_noise(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        Ok(sigma.ln() / 4.0)
    }

    /// Loss weighting λ(σ) = (1 + σ²)·σ⁻².
    pub fn weight(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        Ok((1.0 + sigma * sigma) / (sigma * sigma))
    }

    /// Draw σ with ln σ ~ Normal(P_mean, P_std²).
    pub fn sample_sigma(&self, rng: &mut ChaCha8Rng) -> f64 {
        let normal = Normal::new(self.p_mean, self.p_std).expect("valid lognormal");
        normal.sample(rng).exp()
    }
}

/// Piecewise-constant (P_mean, P_std) stages keyed by global step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    /// (step threshold, P_mean, P_std); thresholds strictly increasing,
    /// first at 0 so the lookup is total.
    pub stages: Vec<(u64, f64, f64)>,
}

impl NoiseSchedule {
    /// The staged shift toward higher noise: starting from (1.0, 1.6) and
    /// moving to (1.8, 1.6), (2.2, 1.8), (2.5, 2.0) at steps 8000, 16000,
    /// and 24000.
    pub fn staged() -> NoiseSchedule {
        NoiseSchedule {
            stages: vec![
                (0, 1.0, 1.6),
                (8_000, 1.8, 1.6),
                (16_000, 2.2, 1.8),
                (24_000, 2.5, 2.0),
            ],
        }
    }

    /// Rescale the thresholds for desk-sized runs (multiplier in (0, 1]).
    pub fn scaled(&self, multiplier: f64) -> Result<NoiseSchedule> {
        if multiplier <= 0.0 || multiplier > 1.0 {
            return Err(Error::Config("schedule multiplier must be in (0, 1]".into()));
        }
        let stages: Vec<(u64, f64, f64)> = self
            .stages
            .iter()
            .map(|&(s, m, d)| ((s as f64 * multiplier).round() as u64, m, d))
            .collect();
        let out = NoiseSchedule { stages };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages[0].0 != 0 {
            return Err(Error::Config("schedule must start at step 0".into()));
        }
        if self.stages.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "schedule thresholds must be strictly increasing".into(),
            ));
        }
        if self.stages.iter().any(|&(_, _, std)| std <= 0.0) {
            return Err(Error::Config("P_std must be positive".into()));
        }
        Ok(())
    }

    /// The last stage whose threshold is ≤ step (right-continuous, total).
    pub fn lookup(&self, step: u64) -> (f64, f64) {
        let mut current = (self.stages[0].1, self.stages[0].2);
        for &(threshold, m, s) in &self.stages {
            if threshold <= step {
                current = (m, s);
            } else {
                break;
            }
        }
        current
    }

    pub fn preconditioner_at(&self, step: u64, sigma_data: f64) -> Preconditioner {
        let (p_mean, p_std) = self.lookup(step);
        Preconditioner {
            sigma_data,
            p_mean,
            p_std,
        }
    }
}

/// Log-spaced σ ladder from `sigma_max` down to `sigma_min`, ending at 0.
pub fn sigma_ladder(steps: usize, sigma_max: f64, sigma_min: f64) -> Result<Vec<f64>> {
    if steps < 1 || sigma_max <= sigma_min || sigma_min <= 0.0 {
        return Err(Error::Config("invalid sigma ladder".into()));
    }
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..steps {
        let t = i as f64 / (steps - 1).max(1) as f64;
        out.push((sigma_max.ln() + t * (sigma_min.ln() - sigma_max.ln())).exp());
    }
    out.push(0.0);
    Ok(out)
}
