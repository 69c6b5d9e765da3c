use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix2D, SeededRng};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serializable description of a linear-beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_TRAIN_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {}", self.steps)));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start < end < 1, got {}..{}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }

    fn beta(&self, i: usize) -> f64 {
        self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (self.steps - 1) as f64
    }

    /// `ᾱ_t` without building the table; bit-identical to [`DiffusionSchedule::alpha_bar`].
    pub fn alpha_bar(&self, t: usize) -> f64 {
        (0..=t).fold(1.0, |acc, i| acc * (1.0 - self.beta(i)))
    }
}

/// Variance-preserving noise schedule with cumulative products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_config(ScheduleConfig { steps, beta_start, beta_end })
    }

    pub fn from_config(config: ScheduleConfig) -> Result<Self> {
        config.validate()?;
        let betas: Vec<f64> = (0..config.steps).map(|i| config.beta(i)).collect();
        let mut alpha_bars = Vec::with_capacity(config.steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { config, betas, alpha_bars })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bars[t];
        a / (1.0 - a)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Config(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε` with a fresh `ε`.
    pub fn forward_noise(&self, z0: &Matrix2D, t: usize, rng: &mut SeededRng) -> Result<LatentSample> {
        self.check_t(t)?;
        let noise = rng.normal_matrix(z0.rows(), z0.cols(), 1.0);
        Ok(LatentSample { z: noise_mix(z0, &noise, self.alpha_bar(t)), t, noise })
    }

    /// Same as [`forward_noise`](Self::forward_noise) with a given `ε`.
    pub fn noise_with(&self, z0: &Matrix2D, t: usize, noise: &Matrix2D) -> Result<Matrix2D> {
        self.check_t(t)?;
        if !z0.same_shape(noise) {
            return Err(Error::shape("noise_with", z0.shape(), noise.shape()));
        }
        Ok(noise_mix(z0, noise, self.alpha_bar(t)))
    }

    /// Evenly spaced sampling timesteps, descending, ending at `T/steps − 1`.
    /// `steps = 1` gives the single timestep `T − 1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Config(format!("ddim steps must be in 1..={}, got {steps}", self.len())));
        }
        let total = self.len();
        let mut ts: Vec<usize> = (0..steps).map(|i| ((steps - i) * total) / steps - 1).collect();
        ts.dedup();
        Ok(ts)
    }
}

/// `√ᾱ · z₀ + √(1−ᾱ) · ε`.
pub fn noise_mix(z0: &Matrix2D, noise: &Matrix2D, alpha_bar: f64) -> Matrix2D {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(noise, |x, e| a * x + b * e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Matrix2D,
    pub t: usize,
    pub noise: Matrix2D,
}
