//! Masked view reconstruction.
//!
//! Failed views are rebuilt in feature space from the views that survive.
//! The global variant decodes one sequence over every view and timestep, with
//! learned mask tokens in the failed slots. The local variant decodes each
//! failed view on its own: its outer columns are borrowed from the overlapping
//! edges of the two neighbouring views and the middle is mask tokens.
//!
//! Everything here is batched over scenes: features are `(B, V, T, Hf, Wf, C)`
//! and each scene carries its own [`MaskPattern`].

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureGrid;
use crate::error::{MbevError, Result};
use crate::masking::MaskPattern;
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ParamStore};
use crate::positional::{add_pe, frustum_inputs, sincos_2d, FrustumConfig, FrustumPe, TimePe};
use crate::world::{Rig, NUM_TIMESTEPS, NUM_VIEWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MvrVariant {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvrConfig {
    pub variant: MvrVariant,
    /// Fraction of a failed view's columns filled with mask tokens (local only).
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Spatial positional embedding on the decoder input.
    #[serde(default = "yes")]
    pub pe_enabled: bool,
    #[serde(default = "yes")]
    pub time_pe: bool,
    #[serde(default = "default_token_std")]
    pub mask_token_std: f64,
}

fn default_mlp_ratio() -> usize {
    2
}

fn yes() -> bool {
    true
}

fn default_token_std() -> f64 {
    0.02
}

impl Default for MvrConfig {
    fn default() -> Self {
        Self {
            variant: MvrVariant::Local,
            mask_ratio: 0.76,
            decoder_layers: 2,
            decoder_dim: 128,
            heads: 4,
            mlp_ratio: default_mlp_ratio(),
            pe_enabled: true,
            time_pe: true,
            mask_token_std: default_token_std(),
        }
    }
}

impl MvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(MbevError::InvalidConfig(format!(
                "mask ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.decoder_layers == 0 || self.heads == 0 || self.decoder_dim % self.heads != 0 {
            return Err(MbevError::InvalidConfig(format!(
                "decoder needs >= 1 layer and dim {} divisible by heads {}",
                self.decoder_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Column widths `(left, middle, right)` of a locally assembled view.
pub fn partition_columns(wf: usize, rho: f64) -> Result<(usize, usize, usize)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(MbevError::InvalidConfig(format!("mask ratio {rho} outside (0, 1)")));
    }
    let side = (((1.0 - rho) / 2.0 * wf as f64).round() as usize).max(1);
    if wf < 2 * side + 1 {
        return Err(MbevError::ShapeMismatch(format!(
            "{wf} columns cannot hold two sides of {side} and a middle"
        )));
    }
    Ok((side, wf - 2 * side, side))
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Pre-norm transformer over token sequences `(N, L, C)`. Projects into the
/// decoder width when it differs from `C` and always projects back out.
#[derive(Debug, Clone)]
pub struct Decoder {
    in_proj: Option<Linear>,
    blocks: Vec<DecoderBlock>,
    ln_out: LayerNorm,
    pub out_proj: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &MvrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.decoder_dim;
        let in_proj = if d != channels {
            Some(Linear::new(store, &format!("{name}.in"), channels, d, rng)?)
        } else {
            None
        };
        let blocks = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Ok(DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    attn: Attention::new(store, &format!("{p}.attn"), d, cfg.heads, rng)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, d, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            in_proj,
            blocks,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d)?,
            out_proj: Linear::new(store, &format!("{name}.out"), d, channels, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = match &self.in_proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        for b in &self.blocks {
            let n = b.ln1.forward(&h)?;
            h = (&h + b.attn.forward(&n, &n, &n)?)?;
            h = (&h + b.mlp.forward(&b.ln2.forward(&h)?)?)?;
        }
        self.out_proj.forward(&self.ln_out.forward(&h)?)
    }
}

/// Where a token of an assembled sequence sits in the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub view: usize,
    pub t: usize,
    pub row: usize,
    pub col: usize,
}

/// Decoder input for one scene.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    /// `(L, C)` tokens with positional embeddings added.
    pub tokens: Tensor,
    /// `(L, C)` tokens before positional embeddings.
    pub raw: Tensor,
    pub provenance: Vec<Provenance>,
    /// Sequence positions that belong to failed views.
    pub masked: Vec<usize>,
    /// Failed views covered by this sequence, in output order.
    pub views: Vec<usize>,
    pub grid: (usize, usize),
}

/// Reconstructed `(T, Hf, Wf, C)` slice per failed view.
#[derive(Debug, Clone)]
pub struct ReconstructedFeatures {
    pub slices: Vec<(usize, Tensor)>,
}

/// Output of a batched reconstruction.
#[derive(Debug, Clone)]
pub struct BatchRecon {
    /// Features with failed views replaced, `(B, V, T, Hf, Wf, C)`.
    pub features: Tensor,
    /// Reconstructions of the failed slices, `(P, T, Hf, Wf, C)`.
    pub recon: Tensor,
    /// Original features of the failed slices, same shape, detached.
    pub target: Tensor,
    /// `(scene, view)` of each failed slice, scene-major.
    pub pairs: Vec<(usize, usize)>,
}

impl BatchRecon {
    pub fn loss(&self) -> Result<Tensor> {
        recon_loss(&self.target, &self.recon)
    }
}

/// `(scene, view)` pairs of every failed view in the batch.
pub fn masked_pairs(patterns: &[MaskPattern]) -> Vec<(usize, usize)> {
    patterns
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked_views().into_iter().map(move |v| (b, v)))
        .collect()
}

/// Gather indices into `cat([base (B*V rows), extra])` that take row
/// `B*V + extra_of(pair)` for failed slices and the base row otherwise.
fn select_indices(b: usize, pairs: &[(usize, usize)], extra_of: impl Fn(usize) -> usize) -> Vec<u32> {
    let mut sel: Vec<u32> = (0..(b * NUM_VIEWS) as u32).collect();
    for (i, &(s, v)) in pairs.iter().enumerate() {
        sel[s * NUM_VIEWS + v] = (b * NUM_VIEWS + extra_of(i)) as u32;
    }
    sel
}

fn check_batch(features: &Tensor, patterns: &[MaskPattern]) -> Result<(usize, usize, usize, usize)> {
    let d = features.dims();
    if d.len() != 6 || d[1] != NUM_VIEWS || d[2] != NUM_TIMESTEPS || d[0] != patterns.len() {
        return Err(MbevError::ShapeMismatch(format!(
            "expected (B={}, 6, 2, Hf, Wf, C) features, got {d:?}",
            patterns.len()
        )));
    }
    Ok((d[0], d[3], d[4], d[5]))
}

/// Replace the failed slices of `features` by `recon` rows (ordered as
/// [`masked_pairs`]). Unmasked slices are copied exactly.
pub fn substitute_batch(features: &Tensor, patterns: &[MaskPattern], recon: &Tensor) -> Result<Tensor> {
    let (b, hf, wf, c) = check_batch(features, patterns)?;
    let pairs = masked_pairs(patterns);
    if pairs.is_empty() {
        return Ok(features.clone());
    }
    let slice = [NUM_TIMESTEPS, hf, wf, c];
    if recon.dims() != [&[pairs.len()][..], &slice[..]].concat() {
        return Err(MbevError::ShapeMismatch(format!(
            "reconstruction {:?} does not match {} failed slices of {slice:?}",
            recon.dims(),
            pairs.len()
        )));
    }
    let flat = features.reshape((b * NUM_VIEWS, NUM_TIMESTEPS, hf, wf, c))?;
    let src = Tensor::cat(&[&flat, &recon.to_dtype(flat.dtype())?], 0)?;
    let sel = select_indices(b, &pairs, |i| i);
    let idx = Tensor::from_vec(sel, b * NUM_VIEWS, features.device())?;
    Ok(src.index_select(&idx, 0)?.reshape(features.shape())?)
}

/// Every failed slice overwritten by `fill` broadcast over `(T, Hf, Wf)`.
pub fn fill_masked(features: &Tensor, patterns: &[MaskPattern], fill: &Tensor) -> Result<Tensor> {
    let (b, hf, wf, c) = check_batch(features, patterns)?;
    let pairs = masked_pairs(patterns);
    if pairs.is_empty() {
        return Ok(features.clone());
    }
    let flat = features.reshape((b * NUM_VIEWS, NUM_TIMESTEPS, hf, wf, c))?;
    let plane = fill
        .to_dtype(flat.dtype())?
        .reshape((1, 1, 1, 1, c))?
        .broadcast_as((1, NUM_TIMESTEPS, hf, wf, c))?
        .contiguous()?;
    let src = Tensor::cat(&[&flat, &plane], 0)?;
    let sel = select_indices(b, &pairs, |_| 0);
    let idx = Tensor::from_vec(sel, b * NUM_VIEWS, features.device())?;
    Ok(src.index_select(&idx, 0)?.reshape(features.shape())?)
}

/// MSE between original and reconstructed failed-view features.
pub fn recon_loss(f_mask: &Tensor, u_mask: &Tensor) -> Result<Tensor> {
    if f_mask.dims() != u_mask.dims() {
        return Err(MbevError::ShapeMismatch(format!(
            "recon loss: {:?} vs {:?}",
            f_mask.dims(),
            u_mask.dims()
        )));
    }
    Ok((u_mask - f_mask)?.sqr()?.mean_all()?)
}

/// Mask token, reconstruction decoder and the decoder's positional tables.
#[derive(Debug, Clone)]
pub struct Mvr {
    pub cfg: MvrConfig,
    pub mask_token: Var,
    pub decoder: Decoder,
    pe3d: Option<FrustumPe>,
    frustum_in: Option<Tensor>,
    pe2d: Tensor,
    time: TimePe,
    grid: (usize, usize),
    channels: usize,
}

impl Mvr {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: MvrConfig,
        channels: usize,
        grid: (usize, usize),
        rig: &Rig,
        frustum: &FrustumConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant == MvrVariant::Local {
            partition_columns(grid.1, cfg.mask_ratio)?;
        }
        let mask_token = store.normal("mvr.mask_token", channels, cfg.mask_token_std, rng)?;
        let decoder = Decoder::new(store, "mvr.dec", channels, &cfg, rng)?;
        let (pe3d, frustum_in) = match cfg.variant {
            MvrVariant::Global => (
                Some(FrustumPe::new(store, "mvr.pe3d", frustum, channels, rng)?),
                Some(frustum_inputs(rig, grid.0, grid.1, frustum)?),
            ),
            MvrVariant::Local => (None, None),
        };
        let time = TimePe::new(store, "mvr.time", channels, rng)?;
        let pe2d = sincos_2d(grid.0, grid.1, channels, store.dtype())?;
        Ok(Self {
            cfg,
            mask_token,
            decoder,
            pe3d,
            frustum_in,
            pe2d,
            time,
            grid,
            channels,
        })
    }

    pub fn variant(&self) -> MvrVariant {
        self.cfg.variant
    }

    fn zero_pe(&self) -> Result<Tensor> {
        Ok(Tensor::zeros(self.channels, self.mask_token.dtype(), &Device::Cpu)?)
    }

    fn time_pe(&self) -> Result<Option<Tensor>> {
        Ok(if self.cfg.time_pe {
            Some(self.time.grid_t(true)?)
        } else {
            None
        })
    }

    /// Spatial embedding broadcastable to `(B, V, T, Hf, Wf, C)`.
    fn global_pe(&self) -> Result<Tensor> {
        if !self.cfg.pe_enabled {
            return self.zero_pe();
        }
        let (pe, inp) = match (&self.pe3d, &self.frustum_in) {
            (Some(p), Some(i)) => (p, i),
            _ => return self.zero_pe(),
        };
        let (hf, wf) = self.grid;
        Ok(pe.forward(inp)?.reshape((1, NUM_VIEWS, 1, hf, wf, self.channels))?)
    }

    /// Local planes `(P, Hf, Wf, C)` for the failed `(scene, view)` pairs,
    /// before positional embeddings.
    pub fn local_planes(&self, features: &Tensor, patterns: &[MaskPattern]) -> Result<Tensor> {
        let (_, hf, wf, c) = check_batch(features, patterns)?;
        let (lw, mw, rw) = partition_columns(wf, self.cfg.mask_ratio)?;
        let token = self.mask_token.as_tensor().to_dtype(features.dtype())?;
        let fill = |w: usize| -> Result<Tensor> {
            Ok(token.reshape((1, 1, c))?.broadcast_as((hf, w, c))?.contiguous()?)
        };
        let pairs = masked_pairs(patterns);
        let mut planes = Vec::with_capacity(pairs.len());
        for &(b, v) in &pairs {
            let left = (v + 1) % NUM_VIEWS;
            let right = (v + NUM_VIEWS - 1) % NUM_VIEWS;
            let side = |nb: usize, start: usize, w: usize| -> Result<Tensor> {
                if patterns[b].is_masked(nb) {
                    fill(w)
                } else {
                    let cols = features.get(b)?.get(nb)?.narrow(2, start, w)?;
                    Ok(cols.mean(0)?)
                }
            };
            let l = side(left, wf - lw, lw)?;
            let r = side(right, 0, rw)?;
            planes.push(Tensor::cat(&[&l, &fill(mw)?, &r], 1)?);
        }
        if planes.is_empty() {
            return Ok(Tensor::zeros((0, hf, wf, c), features.dtype(), features.device())?);
        }
        Ok(Tensor::stack(&planes, 0)?)
    }

    /// Decoder input for the local variant: each plane duplicated over both
    /// timesteps, `(P, T, Hf, Wf, C)` before and after positional embedding.
    fn local_input(&self, planes: &Tensor) -> Result<(Tensor, Tensor)> {
        let (p, hf, wf, c) = planes.dims4()?;
        let raw = planes
            .unsqueeze(1)?
            .broadcast_as((p, NUM_TIMESTEPS, hf, wf, c))?
            .contiguous()?;
        let spatial = if self.cfg.pe_enabled {
            self.pe2d.reshape((1, 1, hf, wf, c))?
        } else {
            self.zero_pe()?
        };
        let t = self.time_pe()?;
        let with_pe = add_pe(&raw, &spatial, t.as_ref())?;
        Ok((raw, with_pe))
    }

    /// Global decoder input `(B, V, T, Hf, Wf, C)` before and after PE.
    fn global_input(&self, features: &Tensor, patterns: &[MaskPattern]) -> Result<(Tensor, Tensor)> {
        let raw = fill_masked(features, patterns, self.mask_token.as_tensor())?;
        let pe = self.global_pe()?;
        let t = self.time_pe()?.map(|t| t.unsqueeze(0)).transpose()?;
        let with_pe = add_pe(&raw, &pe, t.as_ref())?;
        Ok((raw, with_pe))
    }

    /// Reconstruct every failed view in the batch and substitute it.
    /// Returns `None` when no scene has a failed view.
    pub fn reconstruct_batch(&self, features: &Tensor, patterns: &[MaskPattern]) -> Result<Option<BatchRecon>> {
        let (b, hf, wf, c) = check_batch(features, patterns)?;
        let pairs = masked_pairs(patterns);
        if pairs.is_empty() {
            return Ok(None);
        }
        for p in patterns {
            if p.count() == NUM_VIEWS {
                return Err(MbevError::NoContext);
            }
        }
        let flat_idx: Vec<u32> = pairs.iter().map(|&(s, v)| (s * NUM_VIEWS + v) as u32).collect();
        let idx = Tensor::from_vec(flat_idx, pairs.len(), features.device())?;
        let flat = features.reshape((b * NUM_VIEWS, NUM_TIMESTEPS, hf, wf, c))?;
        let target = flat.index_select(&idx, 0)?.detach();
        let slice_len = NUM_TIMESTEPS * hf * wf;
        let recon = match self.cfg.variant {
            MvrVariant::Local => {
                let planes = self.local_planes(features, patterns)?;
                let (_, x) = self.local_input(&planes)?;
                let out = self.decoder.forward(&x.reshape((pairs.len(), slice_len, c))?)?;
                out.reshape((pairs.len(), NUM_TIMESTEPS, hf, wf, c))?
            }
            MvrVariant::Global => {
                let (_, x) = self.global_input(features, patterns)?;
                let out = self.decoder.forward(&x.reshape((b, NUM_VIEWS * slice_len, c))?)?;
                out.reshape((b * NUM_VIEWS, NUM_TIMESTEPS, hf, wf, c))?
                    .index_select(&idx, 0)?
            }
        };
        let substituted = substitute_batch(features, patterns, &recon)?;
        Ok(Some(BatchRecon {
            features: substituted,
            recon,
            target,
            pairs,
        }))
    }

    /// Failed slices filled with the mask token, no decoding.
    pub fn fill_batch(&self, features: &Tensor, patterns: &[MaskPattern]) -> Result<Tensor> {
        fill_masked(features, patterns, self.mask_token.as_tensor())
    }

    /// Local decoder input for failed `view` of one scene.
    pub fn assemble_local(
        &self,
        features: &FeatureGrid,
        pattern: &MaskPattern,
        view: usize,
    ) -> Result<AssembledSequence> {
        if !pattern.is_masked(view) {
            return Err(MbevError::ViewNotMasked(view));
        }
        let (hf, wf, c) = features.grid_dims();
        // Neighbour availability must follow the real pattern, so assemble
        // with it and pick the plane belonging to `view`.
        let batch = features.tokens.unsqueeze(0)?;
        let planes = self.local_planes(&batch, std::slice::from_ref(pattern))?;
        let pos = pattern.masked_views().iter().position(|&v| v == view).unwrap();
        let plane = planes.narrow(0, pos, 1)?;
        let (raw, with_pe) = self.local_input(&plane)?;
        let n = NUM_TIMESTEPS * hf * wf;
        let provenance = provenance_for(&[view], hf, wf);
        Ok(AssembledSequence {
            tokens: with_pe.reshape((n, c))?,
            raw: raw.reshape((n, c))?,
            masked: (0..n).collect(),
            provenance,
            views: vec![view],
            grid: (hf, wf),
        })
    }

    /// Global decoder input for one scene: all views and timesteps.
    pub fn assemble_global(&self, features: &FeatureGrid, pattern: &MaskPattern) -> Result<AssembledSequence> {
        match pattern.count() {
            0 => return Err(MbevError::NothingToReconstruct),
            NUM_VIEWS => return Err(MbevError::NoContext),
            _ => {}
        }
        let (hf, wf, c) = features.grid_dims();
        let batch = features.tokens.unsqueeze(0)?;
        let (raw, with_pe) = self.global_input(&batch, std::slice::from_ref(pattern))?;
        let n = NUM_VIEWS * NUM_TIMESTEPS * hf * wf;
        let provenance = provenance_for(&(0..NUM_VIEWS).collect::<Vec<_>>(), hf, wf);
        let masked = provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| pattern.is_masked(p.view))
            .map(|(i, _)| i)
            .collect();
        Ok(AssembledSequence {
            tokens: with_pe.reshape((n, c))?,
            raw: raw.reshape((n, c))?,
            provenance,
            masked,
            views: pattern.masked_views(),
            grid: (hf, wf),
        })
    }

    /// Run the decoder on an assembled sequence and gather the failed slices.
    pub fn decode(&self, seq: &AssembledSequence) -> Result<ReconstructedFeatures> {
        let (hf, wf) = seq.grid;
        let c = self.channels;
        let out = self.decoder.forward(&seq.tokens.unsqueeze(0)?)?.squeeze(0)?;
        let slice_len = NUM_TIMESTEPS * hf * wf;
        let mut slices = Vec::with_capacity(seq.views.len());
        for (i, &v) in seq.views.iter().enumerate() {
            let start = match self.cfg.variant {
                MvrVariant::Local => i * slice_len,
                MvrVariant::Global => v * slice_len,
            };
            let s = out.narrow(0, start, slice_len)?.reshape((NUM_TIMESTEPS, hf, wf, c))?;
            slices.push((v, s));
        }
        Ok(ReconstructedFeatures { slices })
    }
}

fn provenance_for(views: &[usize], hf: usize, wf: usize) -> Vec<Provenance> {
    let mut out = Vec::with_capacity(views.len() * NUM_TIMESTEPS * hf * wf);
    for &view in views {
        for t in 0..NUM_TIMESTEPS {
            for row in 0..hf {
                for col in 0..wf {
                    out.push(Provenance { view, t, row, col });
                }
            }
        }
    }
    out
}

/// Single-scene substitution: failed slices replaced by `u`, the rest copied.
pub fn substitute(
    features: &FeatureGrid,
    pattern: &MaskPattern,
    u: &ReconstructedFeatures,
) -> Result<FeatureGrid> {
    let views = pattern.masked_views();
    let got: Vec<usize> = u.slices.iter().map(|(v, _)| *v).collect();
    if got != views {
        return Err(MbevError::ShapeMismatch(format!(
            "reconstructed views {got:?} do not match failed views {views:?}"
        )));
    }
    if views.is_empty() {
        return Ok(features.clone());
    }
    let recon = Tensor::stack(&u.slices.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(), 0)?;
    let out = substitute_batch(
        &features.tokens.unsqueeze(0)?,
        std::slice::from_ref(pattern),
        &recon,
    )?;
    FeatureGrid::new(out.squeeze(0)?)
}

/// MSE of filling the failed slices with `token` instead of reconstructing them.
pub fn fill_mse(target: &Tensor, token: &Tensor) -> Result<f64> {
    let c = *target.dims().last().unwrap();
    let t = token.to_dtype(target.dtype())?.reshape(c)?;
    let d = target.broadcast_sub(&t)?.sqr()?.mean_all()?;
    Ok(d.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::world::make_rig;

    fn build(variant: MvrVariant, c: usize, grid: (usize, usize), dtype: DType) -> Mvr {
        let rig = make_rig(6, 70.0, 60.0, 1.5, (grid.0 * 8, grid.1 * 8)).unwrap();
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MvrConfig {
            variant,
            decoder_layers: 1,
            decoder_dim: 8,
            heads: 2,
            ..MvrConfig::default()
        };
        Mvr::new(&mut store, cfg, c, grid, &rig, &FrustumConfig::default(), &mut rng).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn random_grid(hf: usize, wf: usize, c: usize, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = NUM_VIEWS * NUM_TIMESTEPS * hf * wf * c;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureGrid::new(Tensor::from_vec(v, (6, 2, hf, wf, c), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_columns(16, 0.76).unwrap(), (2, 12, 2));
        assert_eq!(partition_columns(10, 0.8).unwrap(), (1, 8, 1));
        assert_eq!(partition_columns(3, 0.34).unwrap(), (1, 1, 1));
        assert!(partition_columns(2, 0.5).is_err());
        assert!(partition_columns(8, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn partition_budget(wf in 3usize..200, rho in 0.01f64..0.99) {
            let side = (((1.0 - rho) / 2.0 * wf as f64).round() as usize).max(1);
            match partition_columns(wf, rho) {
                Ok((l, m, r)) => {
                    prop_assert_eq!(l + m + r, wf);
                    prop_assert!(l >= 1 && m >= 1 && r >= 1);
                    prop_assert_eq!((l, r), (side, side));
                }
                Err(_) => prop_assert!(2 * side >= wf),
            }
        }
    }

    #[test]
    fn side_parts_average_the_neighbour_over_time() {
        let mvr = build(MvrVariant::Local, 4, (2, 8), DType::F64);
        let (a, b) = (0.25, 1.75);
        let mut v = vec![0.0; 6 * 2 * 2 * 8 * 4];
        let per_t = 2 * 8 * 4;
        for view in 0..6 {
            for x in &mut v[(view * 2) * per_t..(view * 2 + 1) * per_t] {
                *x = a;
            }
            for x in &mut v[(view * 2 + 1) * per_t..(view * 2 + 2) * per_t] {
                *x = b;
            }
        }
        let f = FeatureGrid::new(Tensor::from_vec(v, (6, 2, 2, 8, 4), &Device::Cpu).unwrap()).unwrap();
        let seq = mvr.assemble_local(&f, &MaskPattern::from_views(&[0]), 0).unwrap();
        let raw = seq.raw.to_vec2::<f64>().unwrap();
        let (lw, mw, _) = partition_columns(8, 0.76).unwrap();
        for (i, p) in seq.provenance.iter().enumerate() {
            if p.col < lw || p.col >= lw + mw {
                assert!(raw[i].iter().all(|x| (x - (a + b) / 2.0).abs() < 1e-12));
            }
        }
        assert_eq!(seq.tokens.dims(), &[2 * 2 * 8, 4]);
    }

    #[test]
    fn both_neighbours_masked_gives_pure_mask_tokens() {
        let mvr = build(MvrVariant::Local, 4, (2, 8), DType::F64);
        let f = random_grid(2, 8, 4, 1);
        let seq = mvr
            .assemble_local(&f, &MaskPattern::from_views(&[0, 1, 5]), 0)
            .unwrap();
        let token = mvr.mask_token.as_tensor().to_vec1::<f64>().unwrap();
        for row in seq.raw.to_vec2::<f64>().unwrap() {
            assert_eq!(row, token);
        }
        assert!(matches!(
            mvr.assemble_local(&f, &MaskPattern::from_views(&[1]), 0),
            Err(MbevError::ViewNotMasked(0))
        ));
    }

    #[test]
    fn left_part_depends_only_on_left_neighbour() {
        let mvr = build(MvrVariant::Local, 4, (2, 8), DType::F64);
        let f = random_grid(2, 8, 4, 2);
        let pattern = MaskPattern::from_views(&[2]);
        let base = mvr.assemble_local(&f, &pattern, 2).unwrap();
        let (lw, _, _) = partition_columns(8, 0.76).unwrap();
        // Perturb every view except the left neighbour (3).
        let mut v = f.tokens.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let per_view = 2 * 2 * 8 * 4;
        for view in [0, 1, 4, 5] {
            for x in &mut v[view * per_view..(view + 1) * per_view] {
                *x += 10.0;
            }
        }
        let g = FeatureGrid::new(Tensor::from_vec(v, (6, 2, 2, 8, 4), &Device::Cpu).unwrap()).unwrap();
        let other = mvr.assemble_local(&g, &pattern, 2).unwrap();
        let (a, b) = (base.raw.to_vec2::<f64>().unwrap(), other.raw.to_vec2::<f64>().unwrap());
        for (i, p) in base.provenance.iter().enumerate() {
            if p.col < lw {
                assert_eq!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn global_sequence_counts_and_errors() {
        let mvr = build(MvrVariant::Global, 8, (8, 16), DType::F32);
        let f = FeatureGrid::new(Tensor::zeros((6, 2, 8, 16, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let seq = mvr.assemble_global(&f, &MaskPattern::from_views(&[3])).unwrap();
        assert_eq!(seq.provenance.len(), 1536);
        assert_eq!(seq.masked.len(), 256);
        assert!(seq.masked.iter().all(|&i| seq.provenance[i].view == 3));
        assert!(matches!(
            mvr.assemble_global(&f, &MaskPattern::from_views(&[0, 1, 2, 3, 4, 5])),
            Err(MbevError::NoContext)
        ));
        assert!(matches!(
            mvr.assemble_global(&f, &MaskPattern::none()),
            Err(MbevError::NothingToReconstruct)
        ));
    }

    #[test]
    fn zero_output_projection_reconstructs_zeros() {
        let mut mvr = build(MvrVariant::Global, 4, (2, 4), DType::F64);
        let mut store = ParamStore::new(DType::F64);
        mvr.decoder.out_proj = Linear::zeros(&mut store, "z", 8, 4).unwrap();
        let f = random_grid(2, 4, 4, 4);
        let p = MaskPattern::from_views(&[1, 4]);
        let u = mvr.decode(&mvr.assemble_global(&f, &p).unwrap()).unwrap();
        assert_eq!(u.slices.len(), 2);
        for (_, s) in &u.slices {
            assert_eq!(max_abs(s), 0.0);
        }
    }

    #[test]
    fn recon_loss_examples() {
        let dev = Device::Cpu;
        let f = Tensor::new(&[0.0f64, 0.0], &dev).unwrap();
        let u = Tensor::new(&[3.0f64, 4.0], &dev).unwrap();
        let l = recon_loss(&f, &u).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 12.5).abs() < 1e-12);
        let ones = Tensor::ones((3, 5), DType::F64, &dev).unwrap();
        let l = recon_loss(&ones.zeros_like().unwrap(), &ones).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert_eq!(recon_loss(&ones, &ones).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(recon_loss(&f, &ones).is_err());
    }

    #[test]
    fn substitution_only_touches_failed_views() {
        let mvr = build(MvrVariant::Local, 4, (2, 8), DType::F64);
        let f = random_grid(2, 8, 4, 5);
        let same = substitute(&f, &MaskPattern::none(), &ReconstructedFeatures { slices: vec![] }).unwrap();
        assert_eq!(max_abs(&(same.tokens - &f.tokens).unwrap()), 0.0);

        let p = MaskPattern::from_views(&[0, 1, 2, 3, 4]);
        let slices = p
            .masked_views()
            .into_iter()
            .map(|v| {
                let s = mvr.assemble_local(&f, &p, v).unwrap();
                (v, mvr.decode(&s).unwrap().slices.remove(0).1)
            })
            .collect();
        let u = ReconstructedFeatures { slices };
        let out = substitute(&f, &p, &u).unwrap();
        let a = out.view(5).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = f.view(5).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        for (v, s) in &u.slices {
            assert_eq!(max_abs(&(out.view(*v).unwrap() - s).unwrap()), 0.0);
        }
    }

    #[test]
    fn batched_and_single_scene_paths_agree() {
        for variant in [MvrVariant::Local, MvrVariant::Global] {
            let mvr = build(variant, 4, (2, 8), DType::F64);
            let f = random_grid(2, 8, 4, 6);
            let p = MaskPattern::from_views(&[1, 2]);
            let batch = mvr
                .reconstruct_batch(&f.tokens.unsqueeze(0).unwrap(), &[p])
                .unwrap()
                .unwrap();
            let single: Vec<Tensor> = match variant {
                MvrVariant::Local => p
                    .masked_views()
                    .into_iter()
                    .map(|v| mvr.decode(&mvr.assemble_local(&f, &p, v).unwrap()).unwrap().slices.remove(0).1)
                    .collect(),
                MvrVariant::Global => mvr
                    .decode(&mvr.assemble_global(&f, &p).unwrap())
                    .unwrap()
                    .slices
                    .into_iter()
                    .map(|(_, s)| s)
                    .collect(),
            };
            let single = Tensor::stack(&single, 0).unwrap();
            assert!(max_abs(&(batch.recon - single).unwrap()) < 1e-12);
        }
    }
}
