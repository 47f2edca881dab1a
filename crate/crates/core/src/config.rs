//! Run configuration: one TOML document covering generation, attack, and
//! evaluation, hashed for checkpoint compatibility checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::diffusion::{ScheduleKind, TextCondition};
use crate::error::{Error, Result};
use crate::scene::SceneParamRanges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub total_steps: usize,
    pub schedule: String,
    pub step_size: usize,
    /// Injection timestep; negative selects the half-schedule default.
    pub start_timestep: i64,
    pub prompt: String,
    pub guidance_scale: f64,
    pub inference_steps: usize,
    pub tau: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            total_steps: 20,
            schedule: "linear".into(),
            step_size: 1,
            start_timestep: -1,
            prompt: "desert, sand, camouflage".into(),
            guidance_scale: 6.5,
            inference_steps: 20,
            tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub linf_bound: f64,
    pub lambda_tv: f64,
    pub snapshot_best: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 8,
            iterations: 400,
            linf_bound: 0.6,
            lambda_tv: 0.1,
            snapshot_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub contrast: [f64; 2],
    pub brightness: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub area_ratio: f64,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let r = SceneParamRanges::default();
        Self {
            contrast: r.contrast,
            brightness: r.brightness,
            rotation_deg: r.rotation_deg,
            area_ratio: r.area_ratio,
            noise_std: r.noise_std,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub scene: SceneConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if self.diffusion.total_steps == 0 {
            return Err(Error::Config("diffusion.total_steps must be positive".into()));
        }
        if self.diffusion.step_size == 0 {
            return Err(Error::Config("diffusion.step_size must be positive".into()));
        }
        self.diffusion
            .schedule
            .parse::<ScheduleKind>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.diffusion.tau <= 0.0 {
            return Err(Error::Config("diffusion.tau must be positive".into()));
        }
        if self.scene.area_ratio <= 0.0 || self.scene.area_ratio > 1.0 {
            return Err(Error::Config("scene.area_ratio must be in (0, 1]".into()));
        }
        for (name, [lo, hi]) in [
            ("contrast", self.scene.contrast),
            ("brightness", self.scene.brightness),
            ("rotation_deg", self.scene.rotation_deg),
        ] {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("scene.{name} range [{lo}, {hi}] is invalid")));
            }
        }
        self.attack_config().validate()?;
        // TextCondition validation (non-empty prompt under guidance)
        TextCondition::new(
            self.diffusion.prompt.clone(),
            self.diffusion.guidance_scale,
            self.diffusion.inference_steps,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule_kind(&self) -> ScheduleKind {
        self.diffusion.schedule.parse().expect("validated")
    }

    pub fn text_condition(&self) -> TextCondition {
        TextCondition::new(
            self.diffusion.prompt.clone(),
            self.diffusion.guidance_scale,
            self.diffusion.inference_steps,
        )
        .expect("validated")
    }

    pub fn scene_ranges(&self) -> SceneParamRanges {
        SceneParamRanges {
            contrast: self.scene.contrast,
            brightness: self.scene.brightness,
            rotation_deg: self.scene.rotation_deg,
            area_ratio: self.scene.area_ratio,
            noise_std: self.scene.noise_std,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            learning_rate: self.optim.learning_rate,
            batch_size: self.optim.batch_size,
            iterations: self.optim.iterations,
            linf_bound: self.optim.linf_bound,
            lambda_tv: self.optim.lambda_tv,
            tau: self.diffusion.tau,
            start_timestep: if self.diffusion.start_timestep < 0 {
                None
            } else {
                Some(self.diffusion.start_timestep as usize)
            },
            snapshot_best: self.optim.snapshot_best,
            ranges: self.scene_ranges(),
            seed: self.seed,
        }
    }

    /// Stable content hash over the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        format!("{digest:x}")
    }
}
