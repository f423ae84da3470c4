use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DEFAULT_LIVE_THRESHOLD, MAX_SH_DEGREE};
use crate::loss::LossWeights;
use crate::mcmc::{AdamParams, LrSchedule, NoiseParams, SgldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneMode {
    /// Single image fitted through an identity camera.
    #[serde(rename = "2d")]
    Image2D,
    /// Multi-view scene described by a transforms manifest.
    #[default]
    #[serde(rename = "3d")]
    MultiView,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Random,
    /// Positions and colours taken from a PLY point cloud.
    Ply,
}

/// Every training setting, as a flat key/value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scene: Option<PathBuf>,
    pub mode: SceneMode,
    pub out: Option<PathBuf>,
    /// Point cloud for `init = "ply"`; defaults to `points3d.ply` beside the manifest.
    pub points: Option<PathBuf>,

    pub max_gaussians: usize,
    pub init_count: usize,
    pub init: InitMode,
    pub extent_multiplier: f64,
    pub init_opacity: f64,
    pub sh_degree: u8,

    pub lambda_dssim: f64,
    pub lambda_o: f64,
    pub lambda_sigma: f64,

    pub lambda_noise: f64,
    pub noise_k: f64,
    pub noise_t: f64,
    pub noise_gate_as_printed: bool,

    pub position_lr_init: f64,
    pub position_lr_final: f64,
    /// Multiplier on the position rates. Unset means the scene extent radius.
    pub position_lr_scale: Option<f64>,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub opacity_lr: f64,
    pub color_lr: f64,

    pub live_threshold: f64,
    pub relocate: bool,
    pub grow: bool,
    pub relocation_cadence: u64,
    pub warmup: u64,
    pub growth_rate: f64,
    /// Last iteration at which relocation and growth may run; 0 means no limit.
    pub relocate_until: u64,

    pub iters: u64,
    pub seed: u64,
    pub deterministic: bool,
    pub log_every: u64,
    /// Write an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Exact-resume sidecar (`*.state.json`) to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr = LrSchedule::default();
        let noise = NoiseParams::default();
        let loss = LossWeights::default();
        TrainConfig {
            scene: None,
            mode: SceneMode::default(),
            out: None,
            points: None,
            max_gaussians: 10_000,
            init_count: 1_000,
            init: InitMode::default(),
            extent_multiplier: 3.0,
            init_opacity: 0.1,
            sh_degree: 0,
            lambda_dssim: loss.dssim,
            lambda_o: loss.opacity,
            lambda_sigma: loss.scale,
            lambda_noise: noise.lambda_noise,
            noise_k: noise.k,
            noise_t: noise.t,
            noise_gate_as_printed: noise.gate_as_printed,
            position_lr_init: lr.position_init,
            position_lr_final: lr.position_final,
            position_lr_scale: None,
            scale_lr: lr.scale,
            rotation_lr: lr.rotation,
            opacity_lr: lr.opacity,
            color_lr: lr.color,
            live_threshold: DEFAULT_LIVE_THRESHOLD,
            relocate: true,
            grow: true,
            relocation_cadence: 100,
            warmup: 500,
            growth_rate: 0.05,
            relocate_until: 0,
            iters: 30_000,
            seed: 0,
            deterministic: false,
            log_every: 50,
            checkpoint_every: 0,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.init_count < 1 || self.max_gaussians < self.init_count {
            return fail(format!(
                "need max_gaussians ≥ init_count ≥ 1, got {} and {}",
                self.max_gaussians, self.init_count
            ));
        }
        if self.relocation_cadence < 1 {
            return fail("relocation_cadence must be ≥ 1".into());
        }
        if !(self.extent_multiplier > 0.0) {
            return fail(format!("extent_multiplier must be > 0, got {}", self.extent_multiplier));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return fail(format!("init_opacity must lie in (0, 1), got {}", self.init_opacity));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return fail(format!("sh_degree must be ≤ {MAX_SH_DEGREE}"));
        }
        if !(self.growth_rate >= 0.0) {
            return fail("growth_rate must be ≥ 0".into());
        }
        if !(self.live_threshold > 0.0 && self.live_threshold < 1.0) {
            return fail("live_threshold must lie in (0, 1)".into());
        }
        if let Some(s) = self.position_lr_scale {
            if !(s > 0.0) {
                return fail("position_lr_scale must be > 0".into());
            }
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.noise_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.lr_schedule(1.0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            dssim: self.lambda_dssim,
            opacity: self.lambda_o,
            scale: self.lambda_sigma,
        }
    }

    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams {
            lambda_noise: self.lambda_noise,
            k: self.noise_k,
            t: self.noise_t,
            gate_as_printed: self.noise_gate_as_printed,
        }
    }

    /// Schedule spanning `iters`, with positions scaled by `position_lr_scale`
    /// or, if unset, by `extent_radius`.
    pub fn lr_schedule(&self, extent_radius: f64) -> LrSchedule {
        LrSchedule {
            position_init: self.position_lr_init,
            position_final: self.position_lr_final,
            position_scale: self.position_lr_scale.unwrap_or(extent_radius),
            total_steps: self.iters,
            scale: self.scale_lr,
            rotation: self.rotation_lr,
            opacity: self.opacity_lr,
            color: self.color_lr,
        }
    }

    pub fn sgld_config(&self, extent_radius: f64) -> SgldConfig {
        SgldConfig {
            adam: AdamParams::default(),
            schedule: self.lr_schedule(extent_radius),
            noise: self.noise_params(),
            planar: self.mode == SceneMode::Image2D,
        }
    }
}
