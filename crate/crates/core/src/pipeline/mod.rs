//! Experiment orchestration: configuration, datasets, checkpoints, the
//! training phases and the evaluation grid.

pub mod config;
pub mod grid;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, ExperimentConfig, GridConfig, PhaseConfig};
pub use grid::{run_grid, GridReport};
pub use train::{finetune, pretrain, train_baseline, Phase, TrainLog};

use crate::error::{MbevError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::checkpoint::TensorTable;
use crate::world::{generate_dataset, read_dataset, write_dataset, Dataset};

/// Training and evaluation splits.
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn generate_splits(data: &DataConfig, model: &ModelConfig) -> Result<Splits> {
    let rig = model.rig.build()?;
    Ok(Splits {
        train: generate_dataset(&data.train_scenes(), &rig)?,
        eval: generate_dataset(&data.eval_scenes(), &rig)?,
    })
}

/// Writes `train.mbds`, `eval.mbds` and the generating config to `dir`.
pub fn write_splits(splits: &Splits, data: &DataConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&splits.train, dir.join("train.mbds"))?;
    write_dataset(&splits.eval, dir.join("eval.mbds"))?;
    fs::write(dir.join("data.json"), serde_json::to_string_pretty(data)?)?;
    Ok(())
}

/// Loads the splits from `dir` when they were generated from the same data
/// config and rig, otherwise generates and writes them.
pub fn load_or_generate_splits(data: &DataConfig, model: &ModelConfig, dir: &Path) -> Result<Splits> {
    let stamp = dir.join("data.json");
    if let Ok(text) = fs::read_to_string(&stamp) {
        if serde_json::from_str::<DataConfig>(&text).ok().as_ref() == Some(data) {
            let splits = Splits {
                train: read_dataset(dir.join("train.mbds"))?,
                eval: read_dataset(dir.join("eval.mbds"))?,
            };
            let size = (model.rig.image_height, model.rig.image_width);
            if splits.train.image_size() == Some(size) {
                return Ok(splits);
            }
        }
    }
    let splits = generate_splits(data, model)?;
    write_splits(&splits, data, dir)?;
    Ok(splits)
}

/// Everything a checkpoint records besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub model: ModelConfig,
    pub phase_config: PhaseConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Optimizer steps taken; with the seed this fixes every random stream
    /// the phase consumed.
    pub steps: usize,
    /// Serialized inputs that produced the checkpoint, including the parent
    /// checkpoint's key. Equal keys mean the run can be reused.
    pub key: String,
    pub log: TrainLog,
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    model.to_table(serde_json::to_value(meta)?)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    if !path.exists() {
        return Err(MbevError::MissingCheckpoint(path.display().to_string()));
    }
    let table = TensorTable::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(table.metadata.clone())?;
    let model = Model::new(meta.model.clone(), meta.seed, DType::F32)?;
    model.load_table(&table)?;
    Ok((model, meta))
}

/// Checkpoint at `path` if its key matches, else `None`.
pub fn reusable(path: &Path, key: &str) -> Result<Option<(Model, CheckpointMeta)>> {
    if !path.exists() {
        return Ok(None);
    }
    let (model, meta) = load_checkpoint(path)?;
    Ok((meta.key == key).then_some((model, meta)))
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}
