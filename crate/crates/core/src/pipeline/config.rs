use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MbevError, Result};
use crate::masking::{Granularity, MaskSchedule};
use crate::model::ModelConfig;
use crate::nn::optim::AdamWConfig;
use crate::world::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Scene generation seed; independent of the training seed so that runs
    /// with different seeds see the same scenes.
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_eval: 400,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

/// Evaluation scenes use a seed family disjoint from the training scenes.
const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

impl DataConfig {
    pub fn train_scenes(&self) -> SceneConfig {
        SceneConfig {
            n_scenes: self.n_train,
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn eval_scenes(&self) -> SceneConfig {
        SceneConfig {
            n_scenes: self.n_eval,
            seed: self.seed.wrapping_add(EVAL_SEED_OFFSET),
            ..self.scene.clone()
        }
    }
}

/// Settings of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the reconstruction loss next to the detection loss.
    pub alpha: f64,
    pub schedule: MaskSchedule,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub optim: AdamWConfig,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            batch_size: 8,
            alpha: 0.05,
            schedule: MaskSchedule::uniform_nonzero(),
            warmup_steps: 50,
            lr_floor: 0.05,
            optim: AdamWConfig::default(),
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MbevError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(MbevError::InvalidConfig("lr must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(MbevError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(MbevError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Masking ratios of the ratio ablation.
    pub ratios: Vec<f64>,
    /// Retrain pretrain and finetune for every ratio; otherwise the full
    /// Local model is evaluated with each ratio substituted at inference.
    pub ratio_retrain: bool,
    /// Evaluate the Global model on every missing-view count, not only one.
    pub global_sweep: bool,
    pub eval_batch: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.60, 0.64, 0.68, 0.72, 0.76, 0.80],
            ratio_retrain: true,
            global_sweep: true,
            eval_batch: 16,
        }
    }
}

/// Everything one experiment needs; the on-disk form is TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub baseline: PhaseConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            baseline: PhaseConfig {
                lr: 5e-4,
                schedule: MaskSchedule::never(),
                alpha: 0.0,
                ..PhaseConfig::default()
            },
            pretrain: PhaseConfig {
                lr: 5e-4,
                ..PhaseConfig::default()
            },
            finetune: PhaseConfig {
                schedule: MaskSchedule::with_zero(0.2, Granularity::PerEpoch).unwrap(),
                ..PhaseConfig::default()
            },
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a possibly partial file. Missing keys take the value of
    /// [`ExperimentConfig::default`] at the same path, so a `[baseline]` table
    /// that only sets `epochs` keeps the baseline's own schedule and rate.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text)?;
        let mut merged = toml::Value::try_from(Self::default()).map_err(|e| MbevError::InvalidConfig(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MbevError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.rig.build()?;
        self.model.encoder.validate((self.model.rig.image_height, self.model.rig.image_width))?;
        self.model.mvr.validate()?;
        self.model.frustum.validate()?;
        for p in [&self.baseline, &self.pretrain, &self.finetune] {
            p.validate()?;
        }
        if self.model.detector.num_classes != self.data.scene.n_classes {
            return Err(MbevError::InvalidConfig(format!(
                "detector has {} classes, scenes have {}",
                self.model.detector.num_classes, self.data.scene.n_classes
            )));
        }
        for &r in &self.grid.ratios {
            if !(r > 0.0 && r < 1.0) {
                return Err(MbevError::InvalidConfig(format!("ratio {r} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Overlays `over` onto `base`, recursing into tables; arrays and scalars
/// are replaced whole.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
