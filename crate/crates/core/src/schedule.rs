//! Discrete variance-preserving noise schedules and the forward process.
//!
//! Timesteps are 1-indexed: `t ∈ 1..=T`. Index 0 is reserved for clean data
//! when a timestep token is needed (see the reward model).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step `beta` values.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Parameter("beta must lie in (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Parameter("beta must be nondecreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// `beta` linearly interpolated from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("T must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps`.
pub fn forward_noise(
    x0: &MotionSequence,
    t: usize,
    eps: &MotionSequence,
    schedule: &NoiseSchedule,
) -> Result<MotionSequence> {
    x0.ensure_same_shape(eps, "forward_noise")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let frames = x0.frames().zip_map(eps.frames(), |x, e| a * x + b * e);
    Ok(MotionSequence::new(frames).expect("finite inputs give finite output"))
}
