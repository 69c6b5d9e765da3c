//! Diffusion DPO: a sigmoid log-margin objective on winner/loser pairs
//! against a frozen reference denoiser, and the stage-2 training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserModel, DiffusionSchedule, GateNoise, Optimizer, Sgd, DEFAULT_TRAIN_STEPS};
use crate::error::{Error, Result};
use crate::mpo::PreferencePair;
use crate::numerics::{neg_log_sigmoid, sigmoid, Matrix2D, SeededRng};

pub const DEFAULT_BETA: f64 = 5000.0;
pub const DEFAULT_DPO_LR: f64 = 8.192e-9;
pub const DEFAULT_DRAWS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    /// Constant timestep weight `ω(λ_t)`.
    pub weight: f64,
    /// Factor `T` in the margin; the training schedule length by default.
    pub schedule_steps: usize,
    pub lr: f64,
    pub steps: usize,
    /// Draw gate noise per item, shared by every pass of that item.
    pub noisy_gates: bool,
    /// Fresh `(t, ε)` draws averaged into each step's loss and gradient.
    pub draws: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            weight: 1.0,
            schedule_steps: DEFAULT_TRAIN_STEPS,
            lr: DEFAULT_DPO_LR,
            steps: 500,
            noisy_gates: true,
            draws: DEFAULT_DRAWS,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be positive".into()));
        }
        if !self.weight.is_finite() || self.schedule_steps == 0 {
            return Err(Error::Config("weight must be finite and schedule_steps positive".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.beta * self.schedule_steps as f64 * self.weight
    }
}

/// One pair with the timestep and noise shared by winner and loser.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatchItem {
    pub pair: PreferencePair,
    pub t: usize,
    pub noise: Matrix2D,
    pub gate_noise: Option<GateNoise>,
}

impl DpoBatchItem {
    pub fn sample(
        pair: PreferencePair,
        model: &DenoiserModel,
        schedule: &DiffusionSchedule,
        noisy_gates: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let cfg = &model.config;
        let t = rng.below(schedule.len());
        let noise = rng.normal_matrix(cfg.latent_tokens, cfg.dim, 1.0);
        let gate_noise = noisy_gates.then(|| GateNoise::draw(cfg, rng));
        Self { pair, t, noise, gate_noise }
    }
}

#[derive(Debug, Clone)]
pub struct DpoOutput {
    pub loss: f64,
    /// Pre-sigmoid margin.
    pub margin: f64,
    pub grad: DenoiserModel,
}

impl DpoOutput {
    pub fn grad_norm(&self) -> f64 {
        self.grad.trainable().iter().map(|m| m.sum_sq()).sum::<f64>().sqrt()
    }
}

fn check_item(item: &DpoBatchItem, shape: (usize, usize)) -> Result<()> {
    let p = &item.pair;
    for (what, m) in [("winner", &p.winner), ("loser", &p.loser), ("noise", &item.noise)] {
        if m.shape() != shape {
            return Err(Error::Data(format!("{what} latent has shape {:?}, model expects {shape:?}", m.shape())));
        }
    }
    Ok(())
}

/// Squared error averaged over entries, matching the stage-1 loss.
fn sq_err(pred: &Matrix2D, noise: &Matrix2D) -> f64 {
    pred.zip_map(noise, |p, e| p - e).sum_sq() / pred.len() as f64
}

/// The margin from the four per-entry mean squared errors
/// `‖ε−ε_θ(x_w)‖², ‖ε−ε_ref(x_w)‖², ‖ε−ε_θ(x_l)‖², ‖ε−ε_ref(x_l)‖²`.
pub fn margin_from_errors(theta_w: f64, ref_w: f64, theta_l: f64, ref_l: f64, cfg: &DpoConfig) -> f64 {
    -cfg.scale() * ((theta_w - ref_w) - (theta_l - ref_l))
}

struct Passes {
    margin: f64,
    x: [Matrix2D; 2],
}

fn margin_passes(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    item: &DpoBatchItem,
    schedule: &DiffusionSchedule,
    cfg: &DpoConfig,
) -> Result<Passes> {
    check_item(item, theta.config.latent_shape())?;
    let gn = item.gate_noise.as_ref();
    let xw = schedule.noise_with(&item.pair.winner, item.t, &item.noise)?;
    let xl = schedule.noise_with(&item.pair.loser, item.t, &item.noise)?;
    let mut errs = [0.0; 4];
    for (k, x) in [&xw, &xl].into_iter().enumerate() {
        let cond = Some(&item.pair.cond);
        errs[2 * k] = sq_err(&theta.forward_tape(x, cond, item.t, gn)?.0, &item.noise);
        errs[2 * k + 1] = sq_err(&reference.forward_tape(x, cond, item.t, gn)?.0, &item.noise);
    }
    let margin = margin_from_errors(errs[0], errs[1], errs[2], errs[3], cfg);
    Ok(Passes { margin, x: [xw, xl] })
}

/// The margin inside the sigmoid.
pub fn implicit_reward_margin(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    item: &DpoBatchItem,
    schedule: &DiffusionSchedule,
    cfg: &DpoConfig,
) -> Result<f64> {
    Ok(margin_passes(theta, reference, item, schedule, cfg)?.margin)
}

/// `−ln σ(margin)` and its gradient with respect to `theta`'s trainable
/// parameters. The reference contributes values only.
pub fn dpo_loss(
    theta: &DenoiserModel,
    reference: &DenoiserModel,
    item: &DpoBatchItem,
    schedule: &DiffusionSchedule,
    cfg: &DpoConfig,
) -> Result<DpoOutput> {
    let passes = margin_passes(theta, reference, item, schedule, cfg)?;
    let margin = passes.margin;
    let loss = neg_log_sigmoid(margin);
    // dL/dmargin = −σ(−margin); dmargin/d‖ε−ε̂_w‖² = −s, dmargin/d‖ε−ε̂_l‖² = +s
    let g = sigmoid(-margin) * cfg.scale();
    let mut grad = theta.zeros_like();
    let per_entry = 2.0 / item.noise.len() as f64;
    for (x, sign) in passes.x.iter().zip([1.0, -1.0]) {
        let (pred, tape) = theta.forward_tape(x, Some(&item.pair.cond), item.t, item.gate_noise.as_ref())?;
        let d_out = pred.zip_map(&item.noise, |p, e| sign * g * per_entry * (p - e));
        theta.backward(&tape, &d_out, &mut grad);
    }
    Ok(DpoOutput { loss, margin, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub records: Vec<DpoRecord>,
    pub reference_hash: String,
}

impl DpoReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "loss", "margin", "grad_norm"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.margin),
                format!("{:?}", r.grad_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Least-squares slope of loss against step.
    pub fn loss_slope(&self) -> f64 {
        let n = self.records.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mx = self.records.iter().map(|r| r.step as f64).sum::<f64>() / n;
        let my = self.records.iter().map(|r| r.loss).sum::<f64>() / n;
        let sxy: f64 = self.records.iter().map(|r| (r.step as f64 - mx) * (r.loss - my)).sum();
        let sxx: f64 = self.records.iter().map(|r| (r.step as f64 - mx).powi(2)).sum();
        sxy / sxx
    }
}

/// Plain gradient descent on the DPO loss, one pair per step, cycling through
/// the dataset. Each visit averages loss, margin and gradient over
/// `cfg.draws` fresh `(t, ε)` draws.
pub fn dpo_train(
    theta: &mut DenoiserModel,
    reference: &DenoiserModel,
    dataset: &[PreferencePair],
    schedule: &DiffusionSchedule,
    cfg: &DpoConfig,
    rng: &mut SeededRng,
) -> Result<DpoReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("preference dataset is empty".into()));
    }
    let reference_hash = reference.param_hash();
    let mut opt = Sgd { lr: cfg.lr };
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let pair = &dataset[(step - 1) % dataset.len()];
        let w = 1.0 / cfg.draws as f64;
        let mut mean = DpoOutput { loss: 0.0, margin: 0.0, grad: theta.zeros_like() };
        for _ in 0..cfg.draws {
            let item = DpoBatchItem::sample(pair.clone(), theta, schedule, cfg.noisy_gates, rng);
            let out = dpo_loss(theta, reference, &item, schedule, cfg)?;
            mean.loss += w * out.loss;
            mean.margin += w * out.margin;
            for (acc, g) in mean.grad.trainable_mut().into_iter().zip(out.grad.trainable()) {
                acc.axpy(w, g);
            }
        }
        if !mean.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite DPO loss at step {step}")));
        }
        let grad_norm = mean.grad_norm();
        opt.step(theta, &mean.grad);
        records.push(DpoRecord { step, loss: mean.loss, margin: mean.margin, grad_norm });
    }
    if reference.param_hash() != reference_hash {
        return Err(Error::Numeric("reference parameters changed during training".into()));
    }
    Ok(DpoReport { records, reference_hash })
}
