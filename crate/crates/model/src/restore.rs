//! Inference: guided slice-wise denoising followed by axial super-resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vtcd_core::diffusion::NoiseSchedule;
use vtcd_core::Volume3D;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::denoiser::{denoise_volume, EditConfig, Hyperplane};
use crate::error::{Error, Result};
use crate::srm::super_resolve_volume;
use crate::trainer::{Models, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestoreMode {
    #[default]
    Full,
    DenoiseOnly,
    SrOnly,
}

impl std::str::FromStr for RestoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "denoise-only" => Ok(Self::DenoiseOnly),
            "sr-only" => Ok(Self::SrOnly),
            other => Err(Error::Config(format!(
                "unknown restore mode {other:?}, expected full, denoise-only or sr-only"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Restorer {
    pub config: TrainConfig,
    pub models: Models,
    pub hyperplane: Option<Hyperplane>,
    pub edit: EditConfig,
    pub schedule: NoiseSchedule,
}

impl Restorer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config.clone();
        let models = Models::from_checkpoint(ckpt)?;
        let schedule = config.schedule()?.with_sigma_scale(config.sample_eta);
        Ok(Self {
            edit: config.edit()?,
            hyperplane: ckpt.hyperplane.clone(),
            config,
            models,
            schedule,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Overrides the edit strength; zero disables semantic guidance.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.edit = EditConfig::new(lambda, self.edit.apply_range)?;
        Ok(self)
    }

    pub fn denoise(&self, vol: &Volume3D, seed: u64) -> Result<Volume3D> {
        denoise_volume(
            vol,
            &self.models.denoiser,
            self.hyperplane.as_ref(),
            &self.edit,
            &self.schedule,
            seed,
        )
    }

    pub fn super_resolve(&self, vol: &Volume3D) -> Result<Volume3D> {
        super_resolve_volume(vol, &self.models.srm, self.config.sr_scale)
    }

    pub fn restore(&self, vol: &Volume3D, mode: RestoreMode, seed: u64) -> Result<Volume3D> {
        match mode {
            RestoreMode::Full => self.super_resolve(&self.denoise(vol, seed)?),
            RestoreMode::DenoiseOnly => self.denoise(vol, seed),
            RestoreMode::SrOnly => self.super_resolve(vol),
        }
    }
}
