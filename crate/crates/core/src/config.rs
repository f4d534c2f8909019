//! Experiment hyperparameters, serialized as one JSON document per run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitConfig, SyntheticConfig};
use crate::error::{ensure, Error, Result};
use crate::losses::LambdaSchedule;
use crate::models::{RegConfig, SegConfig};
use crate::warp::AugmentRanges;

/// Multipliers applied to the nominal epoch counts of each phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScale {
    pub seg_initial: f64,
    pub seg_later: f64,
    pub reg_initial: f64,
    pub reg_later: f64,
}

impl EpochScale {
    pub const UNIT: EpochScale = EpochScale { seg_initial: 1.0, seg_later: 1.0, reg_initial: 1.0, reg_later: 1.0 };
}

/// Mean-Teacher baseline settings. Epoch indices are nominal and scale with
/// `EpochScale::seg_initial`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanTeacherConfig {
    pub ema_decay: f64,
    pub consistency_weight: f64,
    /// Epoch after which the teacher follows the student by EMA instead of copying it.
    pub ema_start_epoch: usize,
    pub ramp_start_epoch: usize,
    pub ramp_end_epoch: usize,
    /// Unannotated images per step.
    pub unlabeled_batch: usize,
}

impl Default for MeanTeacherConfig {
    fn default() -> Self {
        Self {
            ema_decay: 0.99,
            consistency_weight: 1.0,
            ema_start_epoch: 100,
            ramp_start_epoch: 100,
            ramp_end_epoch: 200,
            unlabeled_batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub annotation_rate: f64,
    pub seed: u64,
    /// Pseudo-masks per model per image (N).
    pub n_pseudo: usize,
    /// Registration pyramid depth (K).
    pub k_levels: usize,
    pub lambda_schedule: LambdaSchedule,
    pub seg_lr_initial: f64,
    pub seg_epochs_initial: usize,
    pub seg_lr_later: f64,
    pub seg_epochs_later: usize,
    pub reg_lr_initial: f64,
    pub reg_epochs_initial: usize,
    pub reg_lr_later: f64,
    pub reg_epochs_later: usize,
    pub n_iterations: usize,
    pub epoch_scale: EpochScale,
    pub batch_size: usize,
    /// Validation DSC is measured every this many epochs during pre-training.
    pub validate_every: usize,
    pub mean_teacher: MeanTeacherConfig,
    pub augment: AugmentRanges,
    pub seg: SegConfig,
    pub reg: RegConfig,
    pub data: SyntheticConfig,
    pub split: SplitConfig,
}

impl ExperimentConfig {
    /// Nominal settings at 256×256 on an 820-image dataset.
    pub fn paper() -> Self {
        Self {
            annotation_rate: 0.01,
            seed: 0,
            n_pseudo: 5,
            k_levels: 5,
            lambda_schedule: LambdaSchedule::default(),
            seg_lr_initial: 1e-4,
            seg_epochs_initial: 500,
            seg_lr_later: 1e-5,
            seg_epochs_later: 100,
            reg_lr_initial: 1e-3,
            reg_epochs_initial: 200,
            reg_lr_later: 1e-4,
            reg_epochs_later: 50,
            n_iterations: 8,
            epoch_scale: EpochScale::UNIT,
            batch_size: 4,
            validate_every: 10,
            mean_teacher: MeanTeacherConfig::default(),
            augment: AugmentRanges::default(),
            seg: SegConfig::default(),
            reg: RegConfig::default(),
            data: SyntheticConfig { count: 820, image_size: 256, ..SyntheticConfig::default() },
            split: SplitConfig::paper(),
        }
    }

    /// Single-CPU scale: 250 images at 64×64, 4 iterations, scaled epochs.
    /// Fine-tuning keeps the initial segmentation rate because 30 epochs at
    /// 1e-5 barely move the model.
    pub fn desk() -> Self {
        let size = 64;
        Self {
            n_iterations: 4,
            seg_lr_later: 1e-4,
            epoch_scale: EpochScale { seg_initial: 1.0, seg_later: 0.3, reg_initial: 0.05, reg_later: 0.2 },
            seg: SegConfig { image_size: size, base_width: 8, ..SegConfig::default() },
            reg: RegConfig { image_size: size, ..RegConfig::default() },
            data: SyntheticConfig { count: 250, image_size: size, ..SyntheticConfig::default() },
            split: SplitConfig::desk(),
            ..Self::paper()
        }
    }

    /// Tiny 32×32 runs for smoke and determinism tests.
    pub fn quick() -> Self {
        let size = 32;
        Self {
            n_iterations: 2,
            seg_epochs_initial: 20,
            reg_epochs_initial: 20,
            epoch_scale: EpochScale { seg_initial: 1.0, seg_later: 0.02, reg_initial: 0.1, reg_later: 0.04 },
            validate_every: 5,
            mean_teacher: MeanTeacherConfig {
                ema_start_epoch: 4,
                ramp_start_epoch: 4,
                ramp_end_epoch: 8,
                unlabeled_batch: 2,
                ..MeanTeacherConfig::default()
            },
            seg: SegConfig { image_size: size, base_width: 4, depth: 3, leaky_slope: 0.01 },
            reg: RegConfig {
                image_size: size,
                levels: 3,
                encoder_widths: vec![8, 8, 8],
                decoder_widths: vec![8, 8, 8],
                leaky_slope: 0.2,
            },
            k_levels: 3,
            lambda_schedule: LambdaSchedule::halving(32.0, 3),
            data: SyntheticConfig { count: 30, image_size: size, ..SyntheticConfig::default() },
            split: SplitConfig { test_fraction: 0.2, test_count: None, validation_count: 3, overrides: vec![] },
            annotation_rate: 0.1,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "quick" => Ok(Self::quick()),
            other => Err(Error::Contract(format!("unknown preset {other}; expected paper, desk or quick"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_pseudo >= 1, "n_pseudo must be at least 1");
        ensure!(self.k_levels == self.reg.levels, "k_levels {} differs from reg.levels {}", self.k_levels, self.reg.levels);
        ensure!(
            self.lambda_schedule.depth() == self.k_levels,
            "lambda schedule has {} levels, expected {}",
            self.lambda_schedule.depth(),
            self.k_levels
        );
        ensure!(
            self.seg.image_size == self.reg.image_size && self.seg.image_size == self.data.image_size,
            "segmentation, registration and data image sizes differ"
        );
        ensure!(self.batch_size >= 1 && self.validate_every >= 1, "batch size and validation interval must be positive");
        ensure!(self.annotation_rate > 0.0 && self.annotation_rate <= 1.0, "annotation rate must lie in (0, 1]");
        let mt = &self.mean_teacher;
        ensure!((0.0..1.0).contains(&mt.ema_decay), "EMA decay must lie in [0, 1)");
        ensure!(mt.ramp_start_epoch <= mt.ramp_end_epoch, "consistency ramp ends before it starts");
        for lr in [self.seg_lr_initial, self.seg_lr_later, self.reg_lr_initial, self.reg_lr_later] {
            ensure!(lr > 0.0 && lr.is_finite(), "learning rates must be positive");
        }
        Ok(())
    }

    fn scaled(epochs: usize, factor: f64) -> usize {
        if epochs == 0 {
            0
        } else {
            ((epochs as f64 * factor).round() as usize).max(1)
        }
    }

    pub fn seg_initial_epochs(&self) -> usize {
        Self::scaled(self.seg_epochs_initial, self.epoch_scale.seg_initial)
    }

    pub fn seg_later_epochs(&self) -> usize {
        Self::scaled(self.seg_epochs_later, self.epoch_scale.seg_later)
    }

    pub fn reg_initial_epochs(&self) -> usize {
        Self::scaled(self.reg_epochs_initial, self.epoch_scale.reg_initial)
    }

    pub fn reg_later_epochs(&self) -> usize {
        Self::scaled(self.reg_epochs_later, self.epoch_scale.reg_later)
    }

    /// Mean-Teacher epoch index scaled like the segmentation pre-training.
    pub fn mt_epoch(&self, nominal: usize) -> usize {
        (nominal as f64 * self.epoch_scale.seg_initial).round() as usize
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
