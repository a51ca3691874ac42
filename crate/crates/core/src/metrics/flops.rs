//! Analytic multiply-accumulate counts for one inference. Layer norms,
//! activations, softmax and the pose-only positional embeddings (computable
//! once per rig) are not counted.

use serde::{Deserialize, Serialize};

use crate::masking::MaskPattern;
use crate::model::ModelConfig;
use crate::mvr::MvrVariant;
use crate::world::{NUM_TIMESTEPS, NUM_VIEWS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub encoder: u64,
    pub mvr: u64,
    pub detector: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.encoder + self.mvr + self.detector
    }

    /// Reconstruction share of the whole pipeline.
    pub fn mvr_fraction(&self) -> f64 {
        self.mvr as f64 / self.total() as f64
    }
}

/// `nq` queries attending over `nk` tokens of width `d`, with all four
/// projections.
fn attention(nq: u64, nk: u64, d: u64) -> u64 {
    nq * d * d * 2 + nk * d * d * 2 + 2 * nq * nk * d
}

fn encoder_macs(cfg: &ModelConfig) -> u64 {
    let (hf, wf) = cfg.grid();
    let e = &cfg.encoder;
    let (tokens, c, pd) = ((hf * wf) as u64, e.channels as u64, e.patch_dim() as u64);
    let per_block = tokens * (9 * c + 2 * c * c * e.mlp_ratio as u64);
    let per_image = tokens * pd * c + e.depth as u64 * per_block;
    (NUM_VIEWS * NUM_TIMESTEPS) as u64 * per_image
}

/// Query, key, value and output projections of every decoder layer.
pub fn decoder_projection_macs(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.mvr.decoder_dim as u64;
    cfg.mvr.decoder_layers as u64 * 4 * n * d * d
}

/// One decoder pass over a sequence of `n` tokens.
pub fn decoder_macs(cfg: &ModelConfig, n: u64) -> u64 {
    let m = &cfg.mvr;
    let (c, d) = (cfg.encoder.channels as u64, m.decoder_dim as u64);
    let proj_in = if c != d { n * c * d } else { 0 };
    let rest = 2 * n * n * d + n * 2 * d * d * m.mlp_ratio as u64;
    proj_in + decoder_projection_macs(cfg, n) + m.decoder_layers as u64 * rest + n * d * c
}

pub fn mvr_macs(cfg: &ModelConfig, pattern: &MaskPattern) -> u64 {
    if pattern.is_empty() {
        return 0;
    }
    let (hf, wf) = cfg.grid();
    let plane = (hf * wf) as u64;
    match cfg.mvr.variant {
        MvrVariant::Local => pattern.count() as u64 * decoder_macs(cfg, NUM_TIMESTEPS as u64 * plane),
        MvrVariant::Global => decoder_macs(cfg, (NUM_VIEWS * NUM_TIMESTEPS) as u64 * plane),
    }
}

fn detector_macs(cfg: &ModelConfig) -> u64 {
    let (hf, wf) = cfg.grid();
    let d = &cfg.detector;
    let (q, c) = (d.queries as u64, cfg.encoder.channels as u64);
    let mem = (NUM_VIEWS * NUM_TIMESTEPS * hf * wf) as u64;
    let layer = attention(q, q, c) + attention(q, mem, c) + q * 2 * c * c * d.mlp_ratio as u64;
    let heads = q * c * (d.num_classes as u64 + 1) + q * (c * c + c * 10);
    d.layers as u64 * layer + heads
}

pub fn flop_count(cfg: &ModelConfig, pattern: &MaskPattern) -> FlopBreakdown {
    FlopBreakdown {
        encoder: encoder_macs(cfg),
        mvr: mvr_macs(cfg, pattern),
        detector: detector_macs(cfg),
    }
}
