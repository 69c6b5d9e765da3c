//! Flat experiment configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use traitmix::diffusion::{DenoiserConfig, OptimizerKind, OutputParam, ScheduleConfig, Stage1Config, TwoModeConfig};
use traitmix::dpo::DpoConfig;
use traitmix::mpo::{SamplerConfig, ScoringTask};

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "TRAITMIX_OUTPUT_ROOT";

/// Every tunable of the two-stage pipeline. Defaults describe the desk-scale
/// toy setup; learning rates are tuned for it rather than copied from the
/// image-scale recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,

    pub latent_tokens: usize,
    pub dim: usize,
    pub condition_tokens: usize,
    pub text_tokens: usize,
    pub layers: usize,
    pub conditions: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub lora_rank: usize,
    pub lora_scaling: f64,

    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub guidance: f64,
    pub dropout: f64,

    pub stage1_lr: f64,
    pub stage1_steps: usize,
    pub stage1_optimizer: OptimizerKind,
    pub eval_examples: usize,
    pub eval_every: usize,

    /// Bundles `M` drawn from the condition dataset.
    pub mpo_bundles: usize,
    /// Candidates `H` per bundle.
    pub mpo_candidates: usize,
    pub scoring_task: ScoringTask,
    /// External judge as `[program, args...]`; empty selects the built-in rule scorer.
    pub scorer_command: Vec<String>,
    pub scorer_retries: usize,

    pub dpo_beta: f64,
    pub dpo_lr: f64,
    pub dpo_steps: usize,
    /// `(t, ε)` draws averaged per DPO step.
    pub dpo_draws: usize,
    pub dpo_noisy_gates: bool,

    pub output_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = DenoiserConfig::default();
        let schedule = ScheduleConfig::default();
        let sampler = SamplerConfig::default();
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            latent_tokens: model.latent_tokens,
            dim: model.dim,
            condition_tokens: model.condition_tokens,
            text_tokens: model.text_tokens,
            layers: model.layers,
            conditions: model.conditions,
            experts: model.experts,
            top_k: model.top_k,
            hidden: model.hidden,
            lora_rank: model.lora_rank,
            lora_scaling: model.lora_scaling,
            schedule_steps: schedule.steps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
            ddim_steps: sampler.steps,
            guidance: sampler.omega,
            dropout: traitmix::diffusion::DEFAULT_CONDITION_DROPOUT,
            stage1_lr: 0.03,
            stage1_steps: 2000,
            stage1_optimizer: OptimizerKind::Sgd,
            eval_examples: 64,
            eval_every: 100,
            mpo_bundles: 8,
            mpo_candidates: 4,
            scoring_task: ScoringTask::Dressing,
            scorer_command: Vec::new(),
            scorer_retries: 0,
            dpo_beta: traitmix::dpo::DEFAULT_BETA,
            dpo_lr: traitmix::dpo::DEFAULT_DPO_LR,
            dpo_steps: 500,
            dpo_draws: traitmix::dpo::DEFAULT_DRAWS,
            dpo_noisy_gates: true,
            output_root: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if !table.contains_key("schema_version") {
            return Err(CliError::Validation("config: missing key schema_version".into()));
        }
        let config: Self = table.try_into().map_err(|e| CliError::Validation(format!("config: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every value before any work starts and names each offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad: Vec<(&str, String)> = Vec::new();
        let mut check = |ok: bool, key: &'static str, msg: String| {
            if !ok {
                bad.push((key, msg));
            }
        };
        check(
            self.schema_version == CONFIG_SCHEMA_VERSION,
            "schema_version",
            format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version),
        );
        for (key, v) in [
            ("latent_tokens", self.latent_tokens),
            ("dim", self.dim),
            ("condition_tokens", self.condition_tokens),
            ("layers", self.layers),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("hidden", self.hidden),
            ("lora_rank", self.lora_rank),
            ("schedule_steps", self.schedule_steps),
            ("ddim_steps", self.ddim_steps),
            ("eval_examples", self.eval_examples),
            ("eval_every", self.eval_every),
            ("mpo_bundles", self.mpo_bundles),
            ("mpo_candidates", self.mpo_candidates),
            ("dpo_draws", self.dpo_draws),
        ] {
            check(v > 0, key, "must be positive".into());
        }
        check(
            self.top_k <= self.experts,
            "top_k",
            format!("top_k = {} exceeds experts = {}", self.top_k, self.experts),
        );
        check(
            self.ddim_steps <= self.schedule_steps,
            "ddim_steps",
            format!("ddim_steps = {} exceeds schedule_steps = {}", self.ddim_steps, self.schedule_steps),
        );
        check(self.lora_scaling.is_finite(), "lora_scaling", "must be finite".into());
        check(
            self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0,
            "beta_start",
            format!("need 0 < beta_start <= beta_end < 1, got {} and {}", self.beta_start, self.beta_end),
        );
        check(self.guidance.is_finite(), "guidance", "must be finite".into());
        check((0.0..=1.0).contains(&self.dropout), "dropout", format!("must lie in [0, 1], got {}", self.dropout));
        check(self.stage1_lr >= 0.0 && self.stage1_lr.is_finite(), "stage1_lr", "must be non-negative".into());
        check(self.dpo_lr >= 0.0 && self.dpo_lr.is_finite(), "dpo_lr", "must be non-negative".into());
        check(self.dpo_beta > 0.0 && self.dpo_beta.is_finite(), "dpo_beta", "must be positive".into());
        check(
            self.scorer_command.first().is_none_or(|p| !p.is_empty()),
            "scorer_command",
            "program must be non-empty".into(),
        );
        if !bad.is_empty() {
            let keys: Vec<&str> = bad.iter().map(|(k, _)| *k).collect();
            let details: Vec<String> = bad.iter().map(|(k, m)| format!("  {k}: {m}")).collect();
            return Err(CliError::Validation(format!("invalid keys: {}\n{}", keys.join(", "), details.join("\n"))));
        }
        // backstop for anything the module contracts check that the list above misses
        let wrap = |e: traitmix::Error| CliError::Validation(e.to_string());
        self.model().validate().map_err(wrap)?;
        self.stage1().validate().map_err(wrap)?;
        self.dpo().validate().map_err(wrap)?;
        Ok(())
    }

    pub fn model(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_tokens: self.latent_tokens,
            dim: self.dim,
            condition_tokens: self.condition_tokens,
            text_tokens: self.text_tokens,
            layers: self.layers,
            conditions: self.conditions,
            experts: self.experts,
            top_k: self.top_k,
            hidden: self.hidden,
            lora_rank: self.lora_rank,
            lora_scaling: self.lora_scaling,
            output: OutputParam::Velocity(self.schedule()),
            ..DenoiserConfig::default()
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { steps: self.schedule_steps, beta_start: self.beta_start, beta_end: self.beta_end }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.ddim_steps, omega: self.guidance }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            steps: self.stage1_steps,
            lr: self.stage1_lr,
            dropout: self.dropout,
            optimizer: self.stage1_optimizer,
            eval_examples: self.eval_examples,
            eval_every: self.eval_every,
        }
    }

    pub fn dpo(&self) -> DpoConfig {
        DpoConfig {
            beta: self.dpo_beta,
            schedule_steps: self.schedule_steps,
            lr: self.dpo_lr,
            steps: self.dpo_steps,
            noisy_gates: self.dpo_noisy_gates,
            draws: self.dpo_draws,
            ..DpoConfig::default()
        }
    }

    /// Toy task whose shapes follow `model`; the seed ties it to the run.
    pub fn task(&self, model: &DenoiserConfig) -> TwoModeConfig {
        TwoModeConfig {
            latent_tokens: model.latent_tokens,
            dim: model.dim,
            conditions: model.conditions,
            condition_tokens: model.condition_tokens,
            text_tokens: model.text_tokens,
            seed: self.seed,
            ..TwoModeConfig::default()
        }
    }

    /// `--out` wins; otherwise `<root>/<command>` with the root taken from the
    /// environment when set.
    pub fn output_dir(&self, out: Option<&Path>, command: &str) -> PathBuf {
        if let Some(out) = out {
            return out.to_path_buf();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_root.clone());
        root.join(command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn missing_schema_version_is_rejected() {
        let err = ExperimentConfig::from_toml("seed = 3").unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("schema_version = 1\nbogus_key = 2").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn top_k_above_experts_names_top_k() {
        let c = ExperimentConfig { top_k: 5, experts: 4, ..ExperimentConfig::default() };
        let err = c.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("top_k"));
    }

    #[test]
    fn every_offending_key_is_listed() {
        let c = ExperimentConfig { dropout: 1.5, ddim_steps: 2000, dpo_beta: 0.0, ..ExperimentConfig::default() };
        let msg = c.validate().unwrap_err().to_string();
        for key in ["dropout", "ddim_steps", "dpo_beta"] {
            assert!(msg.contains(key), "{key} missing from {msg}");
        }
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ExperimentConfig::from_toml("schema_version = 1\nseed = 9\nexperts = 6").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.experts, 6);
        assert_eq!(c.top_k, ExperimentConfig::default().top_k);
    }
}
