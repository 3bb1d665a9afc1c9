//! Run configuration files.
//!
//! TOML with `[net]`, `[train]` and `[synth]` sections. Every key has a
//! default; unknown keys and sections are errors. The defaults describe the
//! desk-scale setup; full-scale values are noted per key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aspdc::AspdcConfig;
use crate::deblur::DeblurConfig;
use crate::error::{Error, Result};
use crate::reblur::ReblurConfig;
use crate::synth::{MotionKind, SynthConfig};
use crate::train::{ConsistencyConfig, Schedule, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetSection,
    pub train: TrainSection,
    pub synth: SynthSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    /// Deblurring base width (full scale: 32).
    pub width: usize,
    /// ASPDC modules (full scale: 6).
    pub modules: usize,
    /// Branch layout, 1..=12; 12 is the full module.
    pub aspdc_version: u8,
    pub dilations: [usize; 4],
    /// Reblurring base width (full scale: 16).
    pub reblur_width: usize,
    pub reblur_residual: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            width: 8,
            modules: 2,
            aspdc_version: 12,
            dilations: [1, 1, 2, 4],
            reblur_width: 8,
            reblur_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub batch_size: usize,
    /// Random crop side, divisible by 8; 0 uses whole images.
    pub crop: usize,
    pub lr_floor: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Pretraining of either network.
    pub steps: usize,
    /// Full scale: 1e-4.
    pub lr: f64,
    /// Full scale: 1000 epochs.
    pub halve_every: usize,
    /// Consistency fine-tuning.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Full scale: 200 epochs.
    pub finetune_halve_every: usize,
    pub lambda: f64,
    pub freeze_reblur: bool,
    /// Minimum mean |R(unrelated sharp, I_b) − I_b| after reblur training.
    pub collapse_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            batch_size: 4,
            crop: 0,
            lr_floor: 1e-6,
            log_every: 50,
            checkpoint_every: 0,
            steps: 2000,
            lr: 1e-3,
            halve_every: 1000,
            finetune_steps: 300,
            finetune_lr: 1e-5,
            finetune_halve_every: 100,
            lambda: 0.1,
            freeze_reblur: true,
            collapse_floor: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub frames: usize,
    pub gamma: f32,
    pub noise_sigma: f32,
    pub max_motion: f32,
    /// shake, objects or mixture.
    pub kind: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            seed: s.seed,
            count: s.count,
            size: s.size,
            frames: s.frames,
            gamma: s.crf_gamma,
            noise_sigma: s.noise_sigma,
            max_motion: s.max_motion,
            kind: s.kind.name().into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.deblur()?.aspdc.branches()?;
        self.pretrain().validate()?;
        self.finetune().validate()?;
        self.consistency().validate()?;
        self.synth()?.validate()?;
        if self.net.width == 0 || self.net.reblur_width == 0 || self.net.modules == 0 {
            return Err(Error::Config(
                "network widths and module count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn deblur(&self) -> Result<DeblurConfig> {
        let mut aspdc = AspdcConfig::ablation_version(self.net.aspdc_version)?;
        aspdc.branch_dilations = self.net.dilations;
        Ok(DeblurConfig {
            width: self.net.width,
            n_modules: self.net.modules,
            aspdc,
        })
    }

    pub fn reblur(&self) -> ReblurConfig {
        ReblurConfig {
            width: self.net.reblur_width,
            residual: self.net.reblur_residual,
        }
    }

    fn train_config(&self, steps: usize, lr0: f64, halve_every: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            seed: t.seed,
            steps,
            batch_size: t.batch_size,
            crop: t.crop,
            schedule: Schedule {
                lr0,
                halve_every,
                floor: t.lr_floor,
            },
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn pretrain(&self) -> TrainConfig {
        self.train_config(self.train.steps, self.train.lr, self.train.halve_every)
    }

    pub fn finetune(&self) -> TrainConfig {
        self.train_config(
            self.train.finetune_steps,
            self.train.finetune_lr,
            self.train.finetune_halve_every,
        )
    }

    pub fn consistency(&self) -> ConsistencyConfig {
        ConsistencyConfig {
            lambda: self.train.lambda,
            freeze_reblur: self.train.freeze_reblur,
        }
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let s = &self.synth;
        Ok(SynthConfig {
            seed: s.seed,
            count: s.count,
            size: s.size,
            frames: s.frames,
            crf_gamma: s.gamma,
            noise_sigma: s.noise_sigma,
            max_motion: s.max_motion,
            kind: MotionKind::parse(&s.kind)?,
        })
    }
}
