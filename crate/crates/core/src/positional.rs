//! Positional embeddings for the feature tokens: a fixed 2D sine-cosine grid,
//! a learned embedding of camera-frustum points, and learned per-timestep
//! vectors.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MbevError, Result};
use crate::nn::{param, Mlp, ParamStore};
use crate::world::{CameraSpec, Rig, NUM_TIMESTEPS};

/// 2D sine-cosine table `(Hf, Wf, C)` as row-major `f64`.
///
/// The first `C/2` channels encode the row, the rest the column. Within each
/// half, channel pair `(2k, 2k+1)` is `(sin(p w_k), cos(p w_k))` with
/// `w_k = 10000^(-k / (C/4))`.
pub fn sincos_2d_values(hf: usize, wf: usize, c: usize) -> Result<Vec<f64>> {
    if c == 0 || c % 4 != 0 {
        return Err(MbevError::ShapeMismatch(format!(
            "sine-cosine embedding needs C divisible by 4, got {c}"
        )));
    }
    let quarter = c / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(hf * wf * c);
    for r in 0..hf {
        for col in 0..wf {
            for pos in [r as f64, col as f64] {
                for &w in &omega {
                    let (s, co) = (pos * w).sin_cos();
                    out.push(s);
                    out.push(co);
                }
            }
        }
    }
    Ok(out)
}

pub fn sincos_2d(hf: usize, wf: usize, c: usize, dtype: DType) -> Result<Tensor> {
    let v = sincos_2d_values(hf, wf, c)?;
    Ok(Tensor::from_vec(v, (hf, wf, c), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrustumConfig {
    /// Sample depths along each cell's ray, meters, strictly increasing.
    pub depths: Vec<f64>,
    /// Half-width of the normalization cube, meters.
    pub extent_m: f64,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self {
            depths: (0..8).map(|i| 1.0 + 39.0 * i as f64 / 7.0).collect(),
            extent_m: 50.0,
        }
    }
}

impl FrustumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.len() < 2 {
            return Err(MbevError::InvalidConfig("frustum embedding needs at least 2 depths".into()));
        }
        if self.depths[0] <= 0.0 || self.depths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MbevError::InvalidConfig(
                "frustum depths must be positive and strictly increasing".into(),
            ));
        }
        if !(self.extent_m > 0.0) {
            return Err(MbevError::InvalidConfig("extent must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.depths.len() * 3
    }
}

/// Ego-frame points of every grid cell center at every depth, un-normalized:
/// `[row][col][depth]` flattened.
pub fn frustum_points(cam: &CameraSpec, hf: usize, wf: usize, depths: &[f64]) -> Vec<[f64; 3]> {
    let sx = cam.width as f64 / wf as f64;
    let sy = cam.height as f64 / hf as f64;
    let mut out = Vec::with_capacity(hf * wf * depths.len());
    for r in 0..hf {
        for c in 0..wf {
            let (u, v) = ((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
            for &d in depths {
                let p = cam.back_project(u, v, d);
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    out
}

/// MLP input for the whole rig, `(V, Hf, Wf, 3D)`: frustum points mapped to
/// `[0, 1]` by `(x + E) / 2E` and clamped.
pub fn frustum_inputs(rig: &Rig, hf: usize, wf: usize, cfg: &FrustumConfig) -> Result<Tensor> {
    cfg.validate()?;
    let e = cfg.extent_m;
    let mut data = Vec::with_capacity(rig.cameras.len() * hf * wf * cfg.input_dim());
    for cam in &rig.cameras {
        for p in frustum_points(cam, hf, wf, &cfg.depths) {
            data.extend(p.iter().map(|x| ((x + e) / (2.0 * e)).clamp(0.0, 1.0)));
        }
    }
    Ok(Tensor::from_vec(
        data,
        (rig.cameras.len(), hf, wf, cfg.input_dim()),
        &Device::Cpu,
    )?)
}

/// Learned map from normalized frustum points to `C` channels.
#[derive(Debug, Clone)]
pub struct FrustumPe {
    pub mlp: Mlp,
}

impl FrustumPe {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &FrustumConfig,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            mlp: Mlp::new(store, name, cfg.input_dim(), 2 * channels, channels, rng)?,
        })
    }

    /// `(V, Hf, Wf, 3D)` inputs to `(V, Hf, Wf, C)` embeddings.
    pub fn forward_t(&self, inputs: &Tensor, track: bool) -> Result<Tensor> {
        let dtype = self.mlp.fc1.w.dtype();
        self.mlp.forward_t(&inputs.to_dtype(dtype)?, track)
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        self.forward_t(inputs, true)
    }
}

/// One learned vector per timestep, `(T, C)`.
#[derive(Debug, Clone)]
pub struct TimePe {
    pub table: Var,
}

impl TimePe {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            table: store.normal(name, (NUM_TIMESTEPS, channels), 0.02, rng)?,
        })
    }

    /// Broadcastable against `(V, T, Hf, Wf, C)`.
    pub fn grid_t(&self, track: bool) -> Result<Tensor> {
        let t = param(&self.table, track);
        let c = t.dim(1)?;
        Ok(t.reshape((1, NUM_TIMESTEPS, 1, 1, c))?)
    }
}

/// `tokens + pe (+ time_pe)` with broadcasting; only the channel axis must
/// agree exactly.
pub fn add_pe(tokens: &Tensor, pe: &Tensor, time_pe: Option<&Tensor>) -> Result<Tensor> {
    let c = *tokens.dims().last().unwrap_or(&0);
    let check = |t: &Tensor, what: &str| -> Result<()> {
        let tc = *t.dims().last().unwrap_or(&0);
        if tc != c {
            return Err(MbevError::ShapeMismatch(format!(
                "{what} has {tc} channels, tokens have {c}"
            )));
        }
        Ok(())
    };
    check(pe, "positional embedding")?;
    let mut out = tokens.broadcast_add(pe)?;
    if let Some(tp) = time_pe {
        check(tp, "time embedding")?;
        out = out.broadcast_add(tp)?;
    }
    Ok(out)
}
