use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;
use crate::numerics::{Matrix2D, SeededRng};
use crate::trait_router::RoutingTrace;

use super::model::NoisePredictor;
use super::schedule::DiffusionSchedule;

pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_DDIM_STEPS: usize = 50;
pub const DEFAULT_CONDITION_DROPOUT: f64 = 0.05;

/// Classifier-free guidance: `ω·ε(z, cond) + (1−ω)·ε(z)`.
///
/// Both branches are always evaluated, including at `ω ∈ {0, 1}`.
pub fn cfg_predict<P: NoisePredictor + ?Sized>(
    model: &P,
    z_t: &Matrix2D,
    cond: Option<&ConditionSet>,
    t: usize,
    omega: f64,
) -> Result<Matrix2D> {
    Ok(cfg_predict_traced(model, z_t, cond, t, omega)?.0)
}

fn cfg_predict_traced<P: NoisePredictor + ?Sized>(
    model: &P,
    z_t: &Matrix2D,
    cond: Option<&ConditionSet>,
    t: usize,
    omega: f64,
) -> Result<(Matrix2D, Vec<RoutingTrace>)> {
    let (conditional, traces) = model.predict_traced(z_t, cond, t)?;
    let unconditional = model.predict_noise(z_t, None, t)?;
    Ok((conditional.zip_map(&unconditional, |c, u| omega * c + (1.0 - omega) * u), traces))
}

/// Deterministic DDIM from `z_T ~ N(0, I)` drawn from `rng`.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    steps: usize,
    omega: f64,
    rng: &mut SeededRng,
) -> Result<Matrix2D> {
    let (r, c) = model.latent_shape();
    let z_t = rng.normal_matrix(r, c, 1.0);
    ddim_sample_from(model, cond, schedule, steps, omega, z_t)
}

/// Deterministic DDIM starting from a given `z_T`.
pub fn ddim_sample_from<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    steps: usize,
    omega: f64,
    z_t: Matrix2D,
) -> Result<Matrix2D> {
    Ok(ddim_run(model, cond, schedule, steps, omega, z_t, false)?.0)
}

/// Routing decisions of one sampler step, conditional branch only.
#[derive(Debug, Clone)]
pub struct StepTraces {
    pub step: usize,
    pub t: usize,
    pub traces: Vec<RoutingTrace>,
}

/// [`ddim_sample`] that also returns the routing decisions at every step.
pub fn ddim_sample_traced<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    steps: usize,
    omega: f64,
    rng: &mut SeededRng,
) -> Result<(Matrix2D, Vec<StepTraces>)> {
    let (r, c) = model.latent_shape();
    let z_t = rng.normal_matrix(r, c, 1.0);
    ddim_run(model, cond, schedule, steps, omega, z_t, true)
}

fn ddim_run<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    steps: usize,
    omega: f64,
    mut z: Matrix2D,
    keep_traces: bool,
) -> Result<(Matrix2D, Vec<StepTraces>)> {
    if z.shape() != model.latent_shape() {
        return Err(Error::shape("ddim_sample", z.shape(), model.latent_shape()));
    }
    let ts = schedule.ddim_timesteps(steps)?;
    let mut all = Vec::new();
    for (step, &t) in ts.iter().enumerate() {
        let (eps, traces) = cfg_predict_traced(model, &z, cond, t, omega)?;
        if keep_traces {
            all.push(StepTraces { step, t, traces });
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(step + 1).map_or(1.0, |&tp| schedule.alpha_bar(tp));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = z.zip_map(&eps, |zv, e| (zv - sb * e) / sa);
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z = x0.zip_map(&eps, |x, e| pa * x + pb * e);
    }
    if !z.is_finite() {
        return Err(Error::Numeric("DDIM produced a non-finite latent".into()));
    }
    Ok((z, all))
}

/// Replaces each condition slot, and the text, by the null embedding with
/// probability `p`, independently.
pub fn condition_dropout(cond: &ConditionSet, p: f64, rng: &mut SeededRng) -> Result<ConditionSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1], got {p}")));
    }
    let features = cond.features.iter().map(|f| if rng.uniform() < p { None } else { f.clone() }).collect();
    let text = if rng.uniform() < p { None } else { cond.text.clone() };
    Ok(ConditionSet { features, text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, DenoiserModel};

    /// Returns the exact noise that maps `z` back onto a fixed clean latent.
    struct Analytic<'a> {
        z0: Matrix2D,
        schedule: &'a DiffusionSchedule,
    }

    impl NoisePredictor for Analytic<'_> {
        fn latent_shape(&self) -> (usize, usize) {
            self.z0.shape()
        }

        fn predict_noise(&self, z_t: &Matrix2D, _: Option<&ConditionSet>, t: usize) -> Result<Matrix2D> {
            let ab = self.schedule.alpha_bar(t);
            Ok(z_t.zip_map(&self.z0, |z, x| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()))
        }
    }

    fn small_model() -> DenoiserModel {
        let cfg = DenoiserConfig { latent_tokens: 4, condition_tokens: 3, ..DenoiserConfig::default() };
        DenoiserModel::new(cfg, 9).unwrap()
    }

    fn cond(rng: &mut SeededRng) -> ConditionSet {
        ConditionSet::new(
            vec![rng.normal_matrix(3, 8, 1.0), rng.normal_matrix(3, 8, 1.0)],
            Some(rng.normal_matrix(2, 8, 1.0)),
        )
        .unwrap()
    }

    #[test]
    fn analytic_denoiser_recovers_clean_latent() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = SeededRng::new(1);
        let z0 = rng.normal_matrix(5, 3, 1.0);
        let oracle = Analytic { z0: z0.clone(), schedule: &s };
        for steps in [1, 7, 50] {
            let out = ddim_sample(&oracle, None, &s, steps, 1.0, &mut rng).unwrap();
            assert!(out.max_abs_diff(&z0) < 1e-8, "steps {steps}");
        }
    }

    #[test]
    fn single_step_is_clean_estimate() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let model = small_model();
        let mut rng = SeededRng::new(2);
        let z_t = rng.normal_matrix(4, 8, 1.0);
        let out = ddim_sample_from(&model, None, &s, 1, 1.0, z_t.clone()).unwrap();
        let eps = model.predict(&z_t, None, 999).unwrap();
        let ab = s.alpha_bar(999);
        let want = z_t.zip_map(&eps, |z, e| (z - (1.0 - ab).sqrt() * e) / ab.sqrt());
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_long_schedules() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let model = small_model();
        let c = cond(&mut SeededRng::new(3));
        let a = ddim_sample(&model, Some(&c), &s, 10, 7.5, &mut SeededRng::new(4)).unwrap();
        let b = ddim_sample(&model, Some(&c), &s, 10, 7.5, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(ddim_sample(&model, None, &s, 101, 1.0, &mut SeededRng::new(4)), Err(Error::Config(_))));
    }

    #[test]
    fn guidance_identities_and_affine_blend() {
        let model = small_model();
        let mut rng = SeededRng::new(5);
        let c = cond(&mut rng);
        let z = rng.normal_matrix(4, 8, 1.0);
        let conditional = model.predict(&z, Some(&c), 300).unwrap();
        let unconditional = model.predict(&z, None, 300).unwrap();
        assert_eq!(cfg_predict(&model, &z, Some(&c), 300, 1.0).unwrap(), conditional);
        assert_eq!(cfg_predict(&model, &z, Some(&c), 300, 0.0).unwrap(), unconditional);
        let g = cfg_predict(&model, &z, Some(&c), 300, 7.5).unwrap();
        for (i, v) in g.data().iter().enumerate() {
            let want = 7.5 * conditional.data()[i] - 6.5 * unconditional.data()[i];
            assert!((v - want).abs() < 1e-12);
        }
        // affine in ω: the middle of three points lies on the line through the other two
        let at = |w: f64| cfg_predict(&model, &z, Some(&c), 300, w).unwrap();
        let (p0, p1, p2) = (at(-1.0), at(2.0), at(5.0));
        for i in 0..p0.len() {
            let mid = 0.5 * (p0.data()[i] + p2.data()[i]);
            assert!((p1.data()[i] - mid).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = SeededRng::new(6);
        let c = cond(&mut rng);
        assert_eq!(condition_dropout(&c, 0.0, &mut rng).unwrap(), c);
        assert!(condition_dropout(&c, 1.0, &mut rng).unwrap().is_unconditional());
        assert!(condition_dropout(&c, 1.5, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let mut rng = SeededRng::new(7);
        let c = cond(&mut rng);
        let trials = 10_000;
        let mut dropped = 0usize;
        let mut total = 0usize;
        for _ in 0..trials {
            let d = condition_dropout(&c, 0.5, &mut rng).unwrap();
            dropped += d.features.iter().filter(|f| f.is_none()).count() + usize::from(d.text.is_none());
            total += 3;
        }
        let rate = dropped as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }
}
