use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;
use crate::numerics::{Matrix2D, SeededRng};

use super::model::{DenoiserConfig, DenoiserModel, GateNoise};
use super::sampling::condition_dropout;
use super::schedule::DiffusionSchedule;
use super::task::{ExampleSource, TrainingExample};

pub const DEFAULT_STAGE1_LR: f64 = 1e-5;

/// The random quantities of one loss evaluation: timestep, target noise and
/// gate noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MseDraw {
    pub t: usize,
    pub noise: Matrix2D,
    pub gate_noise: Option<GateNoise>,
}

impl MseDraw {
    /// Uniform `t`, Gaussian `ε`, and gate noise for every routed stream.
    pub fn sample(config: &DenoiserConfig, schedule: &DiffusionSchedule, rng: &mut SeededRng) -> Self {
        let t = rng.below(schedule.len());
        let noise = rng.normal_matrix(config.latent_tokens, config.dim, 1.0);
        let gate_noise = Some(GateNoise::draw(config, rng));
        Self { t, noise, gate_noise }
    }
}

/// A scalar loss and its gradient, laid out as a model of the same shape.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: DenoiserModel,
}

impl LossGrad {
    pub fn grad_norm(&self) -> f64 {
        self.grad.trainable().iter().map(|m| m.sum_sq()).sum::<f64>().sqrt()
    }
}

/// Mean squared noise-prediction error for fixed draws, with gradients for
/// the trainable parameters.
pub fn mse_loss_with(
    model: &DenoiserModel,
    z0: &Matrix2D,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    draw: &MseDraw,
) -> Result<LossGrad> {
    let z_t = schedule.noise_with(z0, draw.t, &draw.noise)?;
    let (pred, tape) = model.forward_tape(&z_t, cond, draw.t, draw.gate_noise.as_ref())?;
    let n = pred.len() as f64;
    let diff = pred.zip_map(&draw.noise, |p, e| p - e);
    let loss = diff.sum_sq() / n;
    let d_out = diff.scale(2.0 / n);
    let mut grad = model.zeros_like();
    model.backward(&tape, &d_out, &mut grad);
    Ok(LossGrad { loss, grad })
}

/// [`mse_loss_with`] with fresh draws from `rng`.
pub fn mse_loss(
    model: &DenoiserModel,
    z0: &Matrix2D,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    rng: &mut SeededRng,
) -> Result<LossGrad> {
    let draw = MseDraw::sample(&model.config, schedule, rng);
    mse_loss_with(model, z0, cond, schedule, &draw)
}

/// Loss value only, without a reverse pass.
pub fn mse_value(
    model: &DenoiserModel,
    z0: &Matrix2D,
    cond: Option<&ConditionSet>,
    schedule: &DiffusionSchedule,
    draw: &MseDraw,
) -> Result<f64> {
    let z_t = schedule.noise_with(z0, draw.t, &draw.noise)?;
    let (pred, _) = model.forward_tape(&z_t, cond, draw.t, draw.gate_noise.as_ref())?;
    Ok(pred.zip_map(&draw.noise, |p, e| p - e).sum_sq() / pred.len() as f64)
}

/// Parameter update rule over the trainable matrices.
pub trait Optimizer {
    fn step(&mut self, model: &mut DenoiserModel, grad: &DenoiserModel);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut DenoiserModel, grad: &DenoiserModel) {
        if self.lr == 0.0 {
            return;
        }
        for (p, g) in model.trainable_mut().into_iter().zip(grad.trainable()) {
            p.axpy(-self.lr, g);
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, model: &mut DenoiserModel, grad: &DenoiserModel) {
        let g: Vec<f64> = grad.trainable_vector();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        for p in model.trainable_mut() {
            for w in p.data_mut() {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                *w -= self.lr * (step + self.weight_decay * *w);
                i += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adamw,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd { lr }),
            OptimizerKind::Adamw => Box::new(AdamW::new(lr)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    /// Size of the fixed held-out batch used to track progress.
    pub eval_examples: usize,
    /// Evaluate every this many steps (and always after the last step).
    pub eval_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: DEFAULT_STAGE1_LR,
            dropout: super::sampling::DEFAULT_CONDITION_DROPOUT,
            optimizer: OptimizerKind::Sgd,
            eval_examples: 64,
            eval_every: 100,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1], got {}", self.dropout)));
        }
        if self.eval_examples == 0 || self.eval_every == 0 {
            return Err(Error::Config("eval_examples and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based update index.
    pub step: usize,
    /// Loss of the example consumed by this update, before the update.
    pub loss: f64,
    /// Held-out loss after this update, when evaluated.
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "loss", "eval_loss"])?;
        for r in &self.records {
            let eval = r.eval_loss.map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([r.step.to_string(), format!("{:?}", r.loss), eval])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A fixed set of examples and draws for tracking the loss.
pub struct EvalSet {
    items: Vec<(TrainingExample, MseDraw)>,
}

impl EvalSet {
    pub fn new(
        source: &dyn ExampleSource,
        config: &DenoiserConfig,
        schedule: &DiffusionSchedule,
        count: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let items = (0..count)
            .map(|_| {
                let ex = source.sample(rng);
                let draw = MseDraw::sample(config, schedule, rng);
                (ex, draw)
            })
            .collect();
        Self { items }
    }

    pub fn loss(&self, model: &DenoiserModel, schedule: &DiffusionSchedule) -> Result<f64> {
        let mut total = 0.0;
        for (ex, draw) in &self.items {
            total += mse_value(model, &ex.z0, Some(&ex.cond), schedule, draw)?;
        }
        Ok(total / self.items.len() as f64)
    }
}

const EVAL_STREAM: u64 = 0x6576616c;

/// Stage-1 training: one example per step, condition dropout, MSE descent on
/// the trainable parameters.
pub fn train_stage1(
    model: &mut DenoiserModel,
    schedule: &DiffusionSchedule,
    source: &dyn ExampleSource,
    config: &Stage1Config,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    config.validate()?;
    let eval = EvalSet::new(source, &model.config, schedule, config.eval_examples, &mut rng.derive(EVAL_STREAM));
    let initial_eval_loss = eval.loss(model, schedule)?;
    let mut optimizer = config.optimizer.build(config.lr);
    let mut records = Vec::with_capacity(config.steps);
    let mut final_eval_loss = initial_eval_loss;
    for step in 1..=config.steps {
        let ex = source.sample(rng);
        let cond = condition_dropout(&ex.cond, config.dropout, rng)?;
        let lg = mse_loss(model, &ex.z0, Some(&cond), schedule, rng)?;
        if !lg.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        optimizer.step(model, &lg.grad);
        let eval_loss = if step % config.eval_every == 0 || step == config.steps {
            let v = eval.loss(model, schedule)?;
            final_eval_loss = v;
            Some(v)
        } else {
            None
        };
        records.push(StepRecord { step, loss: lg.loss, eval_loss });
    }
    Ok(TrainReport { initial_eval_loss, final_eval_loss, records })
}
