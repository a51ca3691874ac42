//! Per-view visual encoder: patch embedding followed by blocks of depthwise
//! 3x3 spatial mixing and a per-token MLP. Both timesteps and all six views
//! share the weights; each image is encoded independently.

use candle_core::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MbevError, Result};
use crate::nn::{fused, param, LayerNorm, Linear, Mlp, ParamStore};
use crate::world::{MultiViewFrame, NUM_TIMESTEPS, NUM_VIEWS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch: usize,
    pub channels: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub frozen: bool,
}

fn default_mlp_ratio() -> usize {
    2
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 64,
            depth: 4,
            mlp_ratio: default_mlp_ratio(),
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        let (h, w) = image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(MbevError::ShapeMismatch(format!(
                "patch {} does not divide image {h}x{w}",
                self.patch
            )));
        }
        if self.channels == 0 || self.depth == 0 {
            return Err(MbevError::InvalidConfig("encoder needs C > 0 and depth >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self, image_size: (usize, usize)) -> (usize, usize) {
        (image_size.0 / self.patch, image_size.1 / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

pub fn set_frozen(cfg: EncoderConfig, frozen: bool) -> EncoderConfig {
    EncoderConfig { frozen, ..cfg }
}

/// Encoder output: tokens shaped `(V, T, Hf, Wf, C)`, or with a leading
/// batch axis `(B, V, T, Hf, Wf, C)` when produced for a batch.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub tokens: Tensor,
}

impl FeatureGrid {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let dims = tokens.dims();
        if dims.len() != 5 || dims[0] != NUM_VIEWS || dims[1] != NUM_TIMESTEPS {
            return Err(MbevError::ShapeMismatch(format!(
                "feature grid must be (6, 2, Hf, Wf, C), got {dims:?}"
            )));
        }
        Ok(Self { tokens })
    }

    /// `(Hf, Wf, C)`.
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        let d = self.tokens.dims();
        (d[2], d[3], d[4])
    }

    /// Both timesteps of view `v`, `(T, Hf, Wf, C)`.
    pub fn view(&self, v: usize) -> Result<Tensor> {
        Ok(self.tokens.get(v)?)
    }
}

/// Splits each image into `patch x patch` tiles flattened as `(py, px, rgb)`
/// and centered around zero. Output `(V * T, Hf, Wf, patch * patch * 3)`.
pub fn patchify(frame: &MultiViewFrame, patch: usize) -> Result<Vec<f32>> {
    let (h, w) = (frame.height, frame.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(MbevError::ShapeMismatch(format!(
            "patch {patch} does not divide image {h}x{w}"
        )));
    }
    let (hf, wf) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(frame.data.len());
    for v in 0..NUM_VIEWS {
        for t in 0..NUM_TIMESTEPS {
            let img = frame.image(v, t);
            for r in 0..hf {
                for c in 0..wf {
                    for py in 0..patch {
                        let row = r * patch + py;
                        let start = (row * w + c * patch) * 3;
                        out.extend(img[start..start + patch * 3].iter().map(|x| x - 0.5));
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), NUM_VIEWS * NUM_TIMESTEPS * hf * wf * patch * patch * 3);
    Ok(out)
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    dw_w: Var,
    dw_b: Var,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        let h = self.ln1.forward_t(x, track)?;
        let mixed = fused::depthwise3x3(&h, &param(&self.dw_w, track), &param(&self.dw_b, track))?;
        let x = (x + mixed)?;
        let y = self.mlp.forward_t(&self.ln2.forward_t(&x, track)?, track)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    embed: Linear,
    blocks: Vec<Block>,
    out_ln: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let embed = Linear::new(store, "encoder.embed", cfg.patch_dim(), c, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("encoder.block{i}");
                Ok(Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), c)?,
                    dw_w: store.normal(&format!("{p}.dw.w"), (9, c), 0.1, rng)?,
                    dw_b: store.zeros(&format!("{p}.dw.b"), c)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), c)?,
                    mlp: Mlp::new(store, &format!("{p}.mlp"), c, c * cfg.mlp_ratio, c, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_ln = LayerNorm::new(store, "encoder.out_ln", c)?;
        Ok(Self {
            cfg,
            embed,
            blocks,
            out_ln,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.cfg = set_frozen(self.cfg, frozen);
    }

    /// Encodes patchified images `(N, Hf, Wf, patch_dim)` into `(N, Hf, Wf, C)`.
    pub fn forward_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let track = !self.cfg.frozen;
        let mut x = self.embed.forward_t(patches, track)?;
        for block in &self.blocks {
            x = block.forward(&x, track)?;
        }
        self.out_ln.forward_t(&x, track)
    }

    /// Encodes a batch of patchified frames `(B, V*T, Hf, Wf, patch_dim)`
    /// into features `(B, V, T, Hf, Wf, C)`.
    pub fn forward_batch(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, n, hf, wf, pd) = patches.dims5()?;
        let out = self.forward_patches(&patches.reshape((b * n, hf, wf, pd))?)?;
        Ok(out.reshape((b, NUM_VIEWS, NUM_TIMESTEPS, hf, wf, self.cfg.channels))?)
    }

    pub fn encode(&self, frame: &MultiViewFrame) -> Result<FeatureGrid> {
        self.cfg.validate((frame.height, frame.width))?;
        let (hf, wf) = self.cfg.grid((frame.height, frame.width));
        let dtype = self.embed.w.dtype();
        let patches = Tensor::from_vec(
            patchify(frame, self.cfg.patch)?,
            (NUM_VIEWS * NUM_TIMESTEPS, hf, wf, self.cfg.patch_dim()),
            &candle_core::Device::Cpu,
        )?
        .to_dtype(dtype)?;
        let out = self.forward_patches(&patches)?;
        FeatureGrid::new(out.reshape((NUM_VIEWS, NUM_TIMESTEPS, hf, wf, self.cfg.channels))?)
    }
}
