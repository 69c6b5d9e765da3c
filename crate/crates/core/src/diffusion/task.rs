use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;
use crate::numerics::{Matrix2D, SeededRng};

/// One training example: a clean latent and the bundle that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub z0: Matrix2D,
    pub cond: ConditionSet,
}

pub trait ExampleSource {
    fn sample(&self, rng: &mut SeededRng) -> TrainingExample;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModeConfig {
    pub latent_tokens: usize,
    pub dim: usize,
    pub conditions: usize,
    pub condition_tokens: usize,
    pub text_tokens: usize,
    /// Per-entry magnitude of the mode mean.
    pub mode_scale: f64,
    /// Weight of the condition-dependent shift in the clean latent.
    pub garment_scale: f64,
    /// Per-entry noise around the conditional mean.
    pub noise_std: f64,
    /// Per-token noise on condition and text features.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for TwoModeConfig {
    fn default() -> Self {
        Self {
            latent_tokens: 16,
            dim: 8,
            conditions: 2,
            condition_tokens: 4,
            text_tokens: 2,
            mode_scale: 1.0,
            garment_scale: 0.5,
            noise_std: 0.1,
            feature_noise: 0.1,
            seed: 0,
        }
    }
}

/// Synthetic bimodal latent distribution.
///
/// Each example draws a mode (`a` or `−a`, equally likely) and one garment
/// vector `g_i ~ N(0, I)` per condition. Condition `i` is a token grid around
/// `g_i`, the text tokens sit around the garments' mean, and the clean latent
/// is `mode + garment_scale · mean(g) + noise` on every token. The mode is not
/// recoverable from the conditions, so a trained model produces both.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeTask {
    pub config: TwoModeConfig,
    mode_a: Vec<f64>,
}

impl TwoModeTask {
    pub fn new(config: TwoModeConfig) -> Result<Self> {
        let dims = [config.latent_tokens, config.dim, config.conditions, config.condition_tokens, config.text_tokens];
        if dims.contains(&0) {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        if !(config.mode_scale > 0.0 && config.noise_std >= 0.0 && config.feature_noise >= 0.0) {
            return Err(Error::Config("task scales must be non-negative with mode_scale > 0".into()));
        }
        let mut rng = SeededRng::new(config.seed).derive(0x6d6f6465);
        // unit direction scaled to per-entry magnitude `mode_scale`
        let raw = rng.normal_vec(config.dim, 1.0);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = config.mode_scale * (config.dim as f64).sqrt() / norm;
        let mode_a = raw.iter().map(|v| v * s).collect();
        Ok(Self { config, mode_a })
    }

    pub fn mode_mean(&self, mode: Mode) -> Vec<f64> {
        match mode {
            Mode::A => self.mode_a.clone(),
            Mode::B => self.mode_a.iter().map(|v| -v).collect(),
        }
    }

    /// A fresh condition bundle together with the garment mean it encodes.
    pub fn sample_condition(&self, rng: &mut SeededRng) -> (ConditionSet, Vec<f64>) {
        let c = &self.config;
        let garments: Vec<Vec<f64>> = (0..c.conditions).map(|_| rng.normal_vec(c.dim, 1.0)).collect();
        let mean: Vec<f64> =
            (0..c.dim).map(|j| garments.iter().map(|g| g[j]).sum::<f64>() / c.conditions as f64).collect();
        let mut grid = |row: &[f64], tokens: usize| {
            let noise = rng.normal_matrix(tokens, c.dim, c.feature_noise);
            Matrix2D::broadcast_row(row, tokens).zip_map(&noise, |a, b| a + b)
        };
        let features: Vec<Matrix2D> = garments.iter().map(|g| grid(g, c.condition_tokens)).collect();
        let text = grid(&mean, c.text_tokens);
        let cond = ConditionSet { features: features.into_iter().map(Some).collect(), text: Some(text) };
        (cond, mean)
    }

    /// Clean latent for a given mode and garment mean.
    pub fn latent(&self, mode: Mode, garment_mean: &[f64], rng: &mut SeededRng) -> Matrix2D {
        let c = &self.config;
        let center: Vec<f64> =
            self.mode_mean(mode).iter().zip(garment_mean).map(|(m, g)| m + c.garment_scale * g).collect();
        let noise = rng.normal_matrix(c.latent_tokens, c.dim, c.noise_std);
        Matrix2D::broadcast_row(&center, c.latent_tokens).zip_map(&noise, |a, b| a + b)
    }

    pub fn sample_with_mode(&self, rng: &mut SeededRng) -> (TrainingExample, Mode) {
        let mode = if rng.uniform() < 0.5 { Mode::A } else { Mode::B };
        let (cond, mean) = self.sample_condition(rng);
        let z0 = self.latent(mode, &mean, rng);
        (TrainingExample { z0, cond }, mode)
    }

    /// The mode whose broadcast mean is closer to `z` in Frobenius distance;
    /// ties go to A.
    pub fn nearest_mode(&self, z: &Matrix2D) -> Mode {
        let dist = |mode| {
            let m = self.mode_mean(mode);
            (0..z.rows()).map(|r| z.row(r).iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>()
        };
        if dist(Mode::A) <= dist(Mode::B) {
            Mode::A
        } else {
            Mode::B
        }
    }
}

impl ExampleSource for TwoModeTask {
    fn sample(&self, rng: &mut SeededRng) -> TrainingExample {
        self.sample_with_mode(rng).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_are_opposite_with_requested_scale() {
        let task = TwoModeTask::new(TwoModeConfig::default()).unwrap();
        let a = task.mode_mean(Mode::A);
        let b = task.mode_mean(Mode::B);
        assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samples_cover_both_modes_and_classify_correctly() {
        let task = TwoModeTask::new(TwoModeConfig::default()).unwrap();
        let mut rng = SeededRng::new(3);
        let mut count_a = 0;
        let mut agree = 0;
        let n = 2000;
        for _ in 0..n {
            let (ex, mode) = task.sample_with_mode(&mut rng);
            assert_eq!(ex.z0.shape(), (16, 8));
            assert_eq!(ex.cond.condition_count(), 2);
            count_a += usize::from(mode == Mode::A);
            agree += usize::from(task.nearest_mode(&ex.z0) == mode);
        }
        assert!((count_a as f64 / n as f64 - 0.5).abs() < 0.05);
        assert!(agree as f64 / n as f64 > 0.9);
    }

    #[test]
    fn exact_mode_means_classify_to_themselves() {
        let task = TwoModeTask::new(TwoModeConfig::default()).unwrap();
        for mode in [Mode::A, Mode::B] {
            let z = Matrix2D::broadcast_row(&task.mode_mean(mode), 16);
            assert_eq!(task.nearest_mode(&z), mode);
        }
    }
}
