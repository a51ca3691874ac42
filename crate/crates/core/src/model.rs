//! The full network: encoder, reconstruction module and detection head over
//! one parameter store.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, Encoder, EncoderConfig};
use crate::detection::{DetectionSet, Detector, DetectorConfig};
use crate::error::{MbevError, Result};
use crate::masking::MaskPattern;
use crate::mvr::{BatchRecon, Mvr, MvrConfig};
use crate::nn::checkpoint::TensorTable;
use crate::nn::ParamStore;
use crate::positional::FrustumConfig;
use crate::world::{make_rig, MultiViewFrame, Rig, NUM_TIMESTEPS, NUM_VIEWS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub hfov_deg: f64,
    pub yaw_spacing_deg: f64,
    pub cam_height_m: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            hfov_deg: 70.0,
            yaw_spacing_deg: 60.0,
            cam_height_m: 1.5,
            image_height: 64,
            image_width: 128,
        }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<Rig> {
        make_rig(
            NUM_VIEWS,
            self.hfov_deg,
            self.yaw_spacing_deg,
            self.cam_height_m,
            (self.image_height, self.image_width),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mvr: MvrConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub frustum: FrustumConfig,
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        self.encoder
            .grid((self.rig.image_height, self.rig.image_width))
    }
}

/// How failed views are presented to the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Completion {
    /// Decode and substitute reconstructions.
    Reconstruct,
    /// Learned mask token in every failed slot.
    MaskToken,
    Zeros,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub rig: Rig,
    pub encoder: Encoder,
    pub mvr: Mvr,
    pub detector: Detector,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let rig = cfg.rig.build()?;
        cfg.encoder.validate(rig.image_size())?;
        let grid = cfg.grid();
        let c = cfg.encoder.channels;
        let mut store = ParamStore::new(dtype);
        // Separate streams keep each component's initialization independent
        // of the others' sizes.
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let encoder = Encoder::new(&mut store, cfg.encoder, &mut stream(1))?;
        let mvr = Mvr::new(&mut store, cfg.mvr.clone(), c, grid, &rig, &cfg.frustum, &mut stream(2))?;
        let detector = Detector::new(
            &mut store,
            cfg.detector.clone(),
            c,
            grid,
            &rig,
            &cfg.frustum,
            &mut stream(3),
        )?;
        Ok(Self {
            cfg,
            store,
            rig,
            encoder,
            mvr,
            detector,
        })
    }

    /// Same architecture with identical weights.
    pub fn duplicate(&self) -> Result<Self> {
        let m = Self::new(self.cfg.clone(), 0, self.store.dtype())?;
        m.store.copy_from(&self.store)?;
        let mut m = m;
        m.encoder.set_frozen(self.encoder.cfg.frozen);
        Ok(m)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder.set_frozen(frozen);
    }

    /// Patchified batch `(B, V*T, Hf, Wf, patch_dim)`.
    pub fn patch_batch(&self, frames: &[&MultiViewFrame]) -> Result<Tensor> {
        let (hf, wf) = self.cfg.grid();
        let pd = self.cfg.encoder.patch_dim();
        let mut data = Vec::with_capacity(frames.len() * NUM_VIEWS * NUM_TIMESTEPS * hf * wf * pd);
        for f in frames {
            if (f.height, f.width) != self.rig.image_size() {
                return Err(MbevError::ShapeMismatch(format!(
                    "frame {}x{} vs rig {:?}",
                    f.height,
                    f.width,
                    self.rig.image_size()
                )));
            }
            data.extend(patchify(f, self.cfg.encoder.patch)?);
        }
        Ok(Tensor::from_vec(
            data,
            (frames.len(), NUM_VIEWS * NUM_TIMESTEPS, hf, wf, pd),
            &Device::Cpu,
        )?
        .to_dtype(self.dtype())?)
    }

    /// Features `(B, V, T, Hf, Wf, C)`.
    pub fn encode(&self, frames: &[&MultiViewFrame]) -> Result<Tensor> {
        self.encoder.forward_batch(&self.patch_batch(frames)?)
    }

    /// Fill or reconstruct failed views. Scenes with an empty pattern pass
    /// through untouched; reconstruction is skipped when no scene has one.
    pub fn complete(
        &self,
        features: &Tensor,
        patterns: &[MaskPattern],
        mode: Completion,
    ) -> Result<(Tensor, Option<BatchRecon>)> {
        if patterns.iter().all(MaskPattern::is_empty) {
            return Ok((features.clone(), None));
        }
        match mode {
            Completion::Reconstruct => match self.mvr.reconstruct_batch(features, patterns)? {
                Some(r) => Ok((r.features.clone(), Some(r))),
                None => Ok((features.clone(), None)),
            },
            Completion::MaskToken => Ok((self.mvr.fill_batch(features, patterns)?, None)),
            Completion::Zeros => {
                let zero = Tensor::zeros(self.cfg.encoder.channels, self.dtype(), &Device::Cpu)?;
                Ok((crate::mvr::fill_masked(features, patterns, &zero)?, None))
            }
        }
    }

    pub fn detect(&self, features: &Tensor) -> Result<DetectionSet> {
        self.detector.forward(features)
    }

    /// Encode, complete and detect in one call.
    pub fn infer(
        &self,
        frames: &[&MultiViewFrame],
        patterns: &[MaskPattern],
        mode: Completion,
    ) -> Result<DetectionSet> {
        let f = self.encode(frames)?;
        let (f, _) = self.complete(&f, patterns, mode)?;
        self.detect(&f)
    }

    pub fn to_table(&self, metadata: serde_json::Value) -> Result<TensorTable> {
        TensorTable::from_store(&self.store, metadata)
    }

    pub fn load_table(&self, table: &TensorTable) -> Result<()> {
        table.load_into(&self.store)
    }

    /// Copies the tensors the two models share by name; the rest keep their
    /// current values. Used when the reconstruction variant changes between
    /// checkpoints.
    pub fn load_shared(&self, table: &TensorTable) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.store.iter() {
            if let Some(t) = table.tensors.get(name) {
                if t.dims == var.dims() {
                    let v = Tensor::from_vec(t.data.clone(), t.dims.as_slice(), &Device::Cpu)?
                        .to_dtype(self.dtype())?;
                    var.set(&v)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }
}
