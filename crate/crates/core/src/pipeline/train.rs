//! The three training phases: detection-only baseline, reconstruction
//! pretraining on a frozen encoder, and joint finetuning.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PhaseConfig;
use crate::detection::{det_loss, GtBox};
use crate::error::{MbevError, Result};
use crate::masking::{MaskPattern, MaskSampler};
use crate::model::{Completion, Model, ModelConfig};
use crate::nn::optim::{cosine_lr, AdamW};
use crate::world::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Baseline,
    Pretrain,
    Finetune,
}

impl Phase {
    /// Stream tag mixed into the seed so phases never share random streams.
    fn tag(self) -> u64 {
        match self {
            Phase::Baseline => 11,
            Phase::Pretrain => 12,
            Phase::Finetune => 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Missing-view count of the epoch when the schedule fixes one.
    pub k: Option<usize>,
    pub steps: usize,
    pub skipped: usize,
    pub det_loss: f64,
    /// Mean focal and box-L1 parts of the detection loss.
    #[serde(default)]
    pub focal: f64,
    #[serde(default)]
    pub box_l1: f64,
    pub mvr_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: Phase,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Per-step loss trace, one value per epoch, of the optimized objective.
    pub fn objective(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| match self.phase {
                Phase::Pretrain => e.mvr_loss,
                _ => e.det_loss,
            })
            .collect()
    }
}

pub fn scene_gts(ds: &Dataset) -> Vec<Vec<GtBox>> {
    ds.scenes
        .iter()
        .map(|s| s.objects.iter().map(GtBox::from).collect())
        .collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

struct Loop {
    cfg: PhaseConfig,
    rng: ChaCha8Rng,
    sampler: MaskSampler,
    opt: AdamW,
    total_steps: usize,
    n: usize,
}

impl Loop {
    fn new(phase: Phase, cfg: &PhaseConfig, model: &Model, prefixes: &[&str], n: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(MbevError::InvalidConfig("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(phase.tag());
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        Ok(Self {
            cfg: cfg.clone(),
            rng,
            sampler: MaskSampler::new(cfg.schedule.clone(), seed ^ (phase.tag() << 32)),
            opt: AdamW::new(model.store.select(prefixes), cfg.optim)?,
            total_steps: steps_per_epoch * cfg.epochs,
            n,
        })
    }

    /// Shuffled batches of scene indices with one pattern per scene.
    fn epoch_batches(&mut self, epoch: usize) -> Vec<(Vec<usize>, Vec<MaskPattern>)> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|c| {
                let pats = c.iter().map(|_| self.sampler.sample_mask(epoch)).collect();
                (c.to_vec(), pats)
            })
            .collect()
    }

    fn step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        let lr = cosine_lr(
            self.cfg.lr,
            self.opt.steps_taken(),
            self.total_steps,
            self.cfg.warmup_steps,
            self.cfg.lr_floor,
        );
        self.opt.step(&grads, lr)
    }

    fn epoch_k(&self, epoch: usize) -> Option<usize> {
        match self.cfg.schedule.granularity {
            crate::masking::Granularity::PerEpoch => Some(self.sampler.epoch_k(epoch)),
            crate::masking::Granularity::PerIteration => None,
        }
    }
}

fn log_epoch(phase: Phase, e: &EpochLog) {
    log::info!(
        "{phase:?} epoch {} k={:?} steps={} skipped={} det={:.4} (focal {:.4} l1 {:.3}) mvr={:.5} ({:.1}s)",
        e.epoch,
        e.k,
        e.steps,
        e.skipped,
        e.det_loss,
        e.focal,
        e.box_l1,
        e.mvr_loss,
        e.seconds
    );
}

/// Encoder and detector trained on complete views with the detection loss.
pub fn train_baseline(cfg: &ModelConfig, phase: &PhaseConfig, train: &Dataset, seed: u64) -> Result<(Model, TrainLog)> {
    let model = Model::new(cfg.clone(), seed, DType::F32)?;
    let log = detection_loop(&model, Phase::Baseline, phase, train, seed, Completion::MaskToken)?;
    Ok((model, log))
}

/// Joint optimization of detection and reconstruction with the encoder
/// unfrozen. `mode` selects how failed views reach the detector; anything
/// other than reconstruction disables the reconstruction loss.
pub fn finetune(model: &mut Model, phase: &PhaseConfig, train: &Dataset, seed: u64, mode: Completion) -> Result<TrainLog> {
    model.set_encoder_frozen(false);
    detection_loop(model, Phase::Finetune, phase, train, seed, mode)
}

fn detection_loop(
    model: &Model,
    phase: Phase,
    cfg: &PhaseConfig,
    train: &Dataset,
    seed: u64,
    mode: Completion,
) -> Result<TrainLog> {
    let prefixes: &[&str] = match (phase, mode) {
        (Phase::Baseline, _) => &["encoder.", "det."],
        (_, Completion::Reconstruct) => &["encoder.", "mvr.", "det."],
        (_, Completion::MaskToken) => &["encoder.", "mvr.mask_token", "det."],
        (_, Completion::Zeros) => &["encoder.", "det."],
    };
    let gts = scene_gts(train);
    let mut lp = Loop::new(phase, cfg, model, prefixes, train.len(), seed)?;
    let mut log = TrainLog { phase, epochs: Vec::new() };
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let (mut det_sum, mut mvr_sum, mut mvr_steps, mut steps) = (0.0, 0.0, 0, 0);
        let (mut focal_sum, mut l1_sum) = (0.0, 0.0);
        for (idx, pats) in lp.epoch_batches(epoch) {
            let frames: Vec<_> = idx.iter().map(|&i| &train.frames[i]).collect();
            let features = model.encode(&frames)?;
            let (completed, recon) = model.complete(&features, &pats, mode)?;
            let batch_gts: Vec<Vec<GtBox>> = idx.iter().map(|&i| gts[i].clone()).collect();
            let det = det_loss(&model.detect(&completed)?, &batch_gts, &model.cfg.detector.loss)?;
            let mut loss = det.total.clone();
            det_sum += scalar(&det.total)?;
            focal_sum += det.focal;
            l1_sum += det.l1;
            if let Some(r) = recon.filter(|_| mode == Completion::Reconstruct) {
                let l = r.loss()?;
                mvr_sum += scalar(&l)?;
                mvr_steps += 1;
                if cfg.alpha > 0.0 {
                    loss = (loss + (l * cfg.alpha)?)?;
                }
            }
            lp.step(&loss)?;
            steps += 1;
        }
        let e = EpochLog {
            epoch,
            k: lp.epoch_k(epoch),
            steps,
            skipped: 0,
            det_loss: det_sum / steps.max(1) as f64,
            focal: focal_sum / steps.max(1) as f64,
            box_l1: l1_sum / steps.max(1) as f64,
            mvr_loss: mvr_sum / mvr_steps.max(1) as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log_epoch(phase, &e);
        log.epochs.push(e);
    }
    Ok(log)
}

/// Frozen-encoder features of every scene, `(V, T, Hf, Wf, C)` each.
pub fn cache_features(model: &Model, ds: &Dataset, batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.frames.chunks(batch.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let f = model.encode(&refs)?.detach();
        for i in 0..chunk.len() {
            out.push(f.get(i)?);
        }
    }
    Ok(out)
}

/// Reconstruction-only training of the MVR parameters. The encoder is frozen,
/// so its features are computed once. Batches whose scenes all drew an empty
/// pattern are skipped.
pub fn pretrain(model: &mut Model, phase: &PhaseConfig, train: &Dataset, seed: u64) -> Result<TrainLog> {
    model.set_encoder_frozen(true);
    let cache = cache_features(model, train, phase.batch_size)?;
    let mut lp = Loop::new(Phase::Pretrain, phase, model, &["mvr."], train.len(), seed)?;
    let mut log = TrainLog {
        phase: Phase::Pretrain,
        epochs: Vec::new(),
    };
    for epoch in 0..phase.epochs {
        let t0 = Instant::now();
        let (mut sum, mut steps, mut skipped) = (0.0, 0, 0);
        for (idx, pats) in lp.epoch_batches(epoch) {
            if pats.iter().all(MaskPattern::is_empty) {
                skipped += 1;
                continue;
            }
            let parts: Vec<&Tensor> = idx.iter().map(|&i| &cache[i]).collect();
            let features = Tensor::stack(&parts, 0)?;
            let Some(r) = model.mvr.reconstruct_batch(&features, &pats)? else {
                skipped += 1;
                continue;
            };
            let loss = r.loss()?;
            sum += scalar(&loss)?;
            lp.step(&loss)?;
            steps += 1;
        }
        let e = EpochLog {
            epoch,
            k: lp.epoch_k(epoch),
            steps,
            skipped,
            det_loss: 0.0,
            focal: 0.0,
            box_l1: 0.0,
            mvr_loss: sum / steps.max(1) as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log_epoch(Phase::Pretrain, &e);
        log.epochs.push(e);
    }
    model.set_encoder_frozen(false);
    Ok(log)
}

/// Mean reconstruction error on held-out scenes next to the error of filling
/// every failed slot with the mask token, under the same patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconQuality {
    pub recon_mse: f64,
    pub fill_mse: f64,
}

pub fn recon_quality(model: &Model, features: &[Tensor], patterns: &[MaskPattern], batch: usize) -> Result<ReconQuality> {
    let (mut rs, mut fs, mut n) = (0.0, 0.0, 0usize);
    for (fb, pb) in features.chunks(batch.max(1)).zip(patterns.chunks(batch.max(1))) {
        let parts: Vec<&Tensor> = fb.iter().collect();
        let f = Tensor::stack(&parts, 0)?;
        let Some(r) = model.mvr.reconstruct_batch(&f, pb)? else {
            continue;
        };
        let w = r.pairs.len();
        rs += scalar(&r.loss()?)? * w as f64;
        let token = model.mvr.mask_token.as_tensor().detach();
        fs += crate::mvr::fill_mse(&r.target, &token)? * w as f64;
        n += w;
    }
    if n == 0 {
        return Err(MbevError::NothingToReconstruct);
    }
    Ok(ReconQuality {
        recon_mse: rs / n as f64,
        fill_mse: fs / n as f64,
    })
}
