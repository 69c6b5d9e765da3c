use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{DenoiserModel, OutputParam};
use super::schedule::{DiffusionSchedule, ScheduleConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Model parameters plus the schedule they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Free-form stage tag, e.g. `stage1` or `stage2`.
    pub stage: String,
    pub step: usize,
    pub schedule: ScheduleConfig,
    pub model: DenoiserModel,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, step: usize, schedule: &DiffusionSchedule, model: DenoiserModel) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            stage: stage.into(),
            step,
            schedule: schedule.config(),
            model,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::from_config(self.schedule)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        ck.model.config.validate()?;
        if ck.model.layers.len() != ck.model.config.layers {
            return Err(Error::Parse("checkpoint layer count disagrees with its config".into()));
        }
        if let OutputParam::Velocity(s) = ck.model.config.output {
            if s != ck.schedule {
                return Err(Error::Parse("model output schedule disagrees with the checkpoint schedule".into()));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
