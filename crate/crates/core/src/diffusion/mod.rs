//! Toy latent diffusion: noise schedule, a small conditional denoiser with
//! hand-written reverse pass, MSE training, classifier-free guidance and
//! deterministic DDIM sampling.

mod checkpoint;
mod model;
mod sampling;
mod schedule;
mod task;
mod training;

pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use model::{
    hash_matrices, timestep_embedding, DenoiserConfig, DenoiserLayer, DenoiserModel, ForwardTape, GateNoise,
    NoisePredictor, OutputParam,
};
pub use sampling::{
    cfg_predict, condition_dropout, ddim_sample, ddim_sample_from, ddim_sample_traced, StepTraces,
    DEFAULT_CONDITION_DROPOUT, DEFAULT_DDIM_STEPS, DEFAULT_GUIDANCE,
};
pub use schedule::{
    noise_mix, DiffusionSchedule, LatentSample, ScheduleConfig, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_TRAIN_STEPS,
};
pub use task::{ExampleSource, Mode, TrainingExample, TwoModeConfig, TwoModeTask};
pub use training::{
    mse_loss, mse_loss_with, mse_value, train_stage1, AdamW, EvalSet, LossGrad, MseDraw, Optimizer, OptimizerKind, Sgd,
    Stage1Config, StepRecord, TrainReport, DEFAULT_STAGE1_LR,
};
