//! Set-prediction 3D detection head: learned queries attend over every view
//! and timestep token, then classify and regress one box each.

pub mod hungarian;

use std::io::Write;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MbevError, Result};
use crate::nn::layers::{log_softmax_last, sigmoid, softmax_last};
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ParamStore};
use crate::positional::{frustum_inputs, FrustumConfig, FrustumPe, TimePe};
use crate::world::{Object3D, Rig, NUM_TIMESTEPS, NUM_VIEWS};

/// Length of a box vector: center (3), size (3), yaw as (sin, cos), velocity (2).
pub const BOX_DIM: usize = 10;
/// Box dimensions that enter the matching cost (velocity excluded).
pub const MATCH_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub queries: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Box centers are squashed into `[-extent, extent]` meters.
    pub extent_m: f64,
    pub z_max_m: f64,
    /// Initial query anchors cover the disk of this radius.
    pub anchor_radius_m: f64,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_mlp_ratio() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_box: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub match_cls: f64,
    pub match_box: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_box: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            match_cls: 2.0,
            match_box: 0.25,
        }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            queries: 30,
            num_classes: 4,
            layers: 2,
            heads: 4,
            mlp_ratio: default_mlp_ratio(),
            extent_m: 50.0,
            z_max_m: 4.0,
            anchor_radius_m: 32.0,
            loss: LossConfig::default(),
        }
    }
}

/// Regression target of a ground-truth object: center, log size, heading as
/// (sin, cos), velocity.
pub fn box_target(o: &Object3D) -> [f64; BOX_DIM] {
    let (s, c) = o.yaw.sin_cos();
    [
        o.center[0],
        o.center[1],
        o.center[2],
        o.size[0].ln(),
        o.size[1].ln(),
        o.size[2].ln(),
        s,
        c,
        o.velocity[0],
        o.velocity[1],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl From<&Object3D> for GtBox {
    fn from(o: &Object3D) -> Self {
        Self {
            class_id: o.class_id,
            center: o.center,
            size: o.size,
            yaw: o.yaw,
            velocity: o.velocity,
        }
    }
}

impl GtBox {
    pub fn target(&self) -> [f64; BOX_DIM] {
        box_target(&Object3D {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            velocity: self.velocity,
            class_id: self.class_id,
        })
    }
}

/// One decoded query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredBox {
    pub score: f64,
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

/// Raw head outputs for a batch.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    /// `(B, Q, K + 1)`; the last class is "no object".
    pub logits: Tensor,
    /// `(B, Q, 10)` in regression space (see [`box_target`]).
    pub reg: Tensor,
}

impl DetectionSet {
    /// Boxes with sizes exponentiated: `(B, Q, 10)`.
    pub fn boxes(&self) -> Result<Tensor> {
        let head = self.reg.narrow(D::Minus1, 0, 3)?;
        let size = self.reg.narrow(D::Minus1, 3, 3)?.exp()?;
        let tail = self.reg.narrow(D::Minus1, 6, 4)?;
        Ok(Tensor::cat(&[&head, &size, &tail], D::Minus1)?)
    }

    pub fn batch_size(&self) -> usize {
        self.logits.dims()[0]
    }

    /// Per-scene host copies `(probs, reg)` as `[scene][query][..]`.
    pub fn to_host(&self) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
        let probs = softmax_last(&self.logits.detach())?
            .to_dtype(DType::F64)?
            .to_vec3::<f64>()?;
        let reg = self.reg.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok((probs, reg))
    }

    /// Scored boxes for every scene: class = most likely object class,
    /// score = its probability.
    pub fn decode(&self) -> Result<Vec<Vec<PredBox>>> {
        let (probs, reg) = self.to_host()?;
        Ok(probs
            .iter()
            .zip(&reg)
            .map(|(p, r)| p.iter().zip(r).map(|(pq, rq)| decode_query(pq, rq)).collect())
            .collect())
    }
}

pub fn decode_query(probs: &[f64], reg: &[f64]) -> PredBox {
    let k = probs.len() - 1;
    let (class_id, score) = probs[..k]
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    PredBox {
        score,
        class_id,
        center: [reg[0], reg[1], reg[2]],
        size: [reg[3].exp(), reg[4].exp(), reg[5].exp()],
        yaw: reg[6].atan2(reg[7]),
        velocity: [reg[8], reg[9]],
    }
}

#[derive(Debug, Clone)]
struct DetBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub queries: Var,
    /// Reference point of every query in BEV, `(Q, 2)`, as logits of the
    /// position within the world extent.
    pub anchors: Var,
    query_pos: Mlp,
    blocks: Vec<DetBlock>,
    ln_out: LayerNorm,
    pub cls_head: Linear,
    pub box_head: Mlp,
    pe3d: FrustumPe,
    frustum_in: Tensor,
    time: TimePe,
    channels: usize,
}

impl Detector {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: DetectorConfig,
        channels: usize,
        grid: (usize, usize),
        rig: &Rig,
        frustum: &FrustumConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.queries == 0 || cfg.num_classes == 0 || cfg.heads == 0 || channels % cfg.heads != 0 || !(cfg.anchor_radius_m > 0.0) {
            return Err(MbevError::InvalidConfig(format!(
                "detector needs queries, classes, heads dividing C = {channels} and a positive anchor radius"
            )));
        }
        let queries = store.normal("det.queries", (cfg.queries, channels), 1.0, rng)?;
        let anchors = store.zeros("det.anchors", (cfg.queries, 2))?;
        anchors.set(&Tensor::from_vec(anchor_logits(cfg.queries, (cfg.anchor_radius_m / cfg.extent_m).min(0.95)), (cfg.queries, 2), store.device())?.to_dtype(store.dtype())?)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("det.block{i}");
                Ok(DetBlock {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), channels)?,
                    self_attn: Attention::new(store, &format!("{p}.self"), channels, cfg.heads, rng)?,
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), channels)?,
                    cross_attn: Attention::new(store, &format!("{p}.cross"), channels, cfg.heads, rng)?,
                    ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), channels)?,
                    mlp: Mlp::new(
                        store,
                        &format!("{p}.mlp"),
                        channels,
                        channels * cfg.mlp_ratio,
                        channels,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ln_out: LayerNorm::new(store, "det.ln_out", channels)?,
            cls_head: Linear::new(store, "det.cls", channels, cfg.num_classes + 1, rng)?,
            box_head: Mlp::new(store, "det.box", channels, channels, BOX_DIM, rng)?,
            pe3d: FrustumPe::new(store, "det.pe3d", frustum, channels, rng)?,
            frustum_in: frustum_inputs(rig, grid.0, grid.1, frustum)?,
            time: TimePe::new(store, "det.time", channels, rng)?,
            query_pos: Mlp::new(store, "det.query_pos", channels, channels, channels, rng)?,
            queries,
            anchors,
            blocks,
            cfg,
            channels,
        })
    }

    /// Positional content of every token, `(V, T, Hf, Wf, C)`.
    fn memory_pos(&self) -> Result<Tensor> {
        let pe = self.pe3d.forward(&self.frustum_in)?.unsqueeze(1)?;
        Ok(pe.broadcast_add(&self.time.grid_t(true)?)?)
    }

    /// Decode a batch of complete feature grids `(B, V, T, Hf, Wf, C)`.
    pub fn forward(&self, features: &Tensor) -> Result<DetectionSet> {
        let d = features.dims();
        if d.len() != 6 || d[1] != NUM_VIEWS || d[2] != NUM_TIMESTEPS || d[5] != self.channels {
            return Err(MbevError::ShapeMismatch(format!(
                "detector expects (B, 6, 2, Hf, Wf, {}), got {d:?}",
                self.channels
            )));
        }
        let b = d[0];
        let n = NUM_VIEWS * NUM_TIMESTEPS * d[3] * d[4];
        let mem = features.reshape((b, n, self.channels))?;
        let pos = self.memory_pos()?.reshape((1, n, self.channels))?;
        let keys = mem.broadcast_add(&pos)?;
        self.forward_tokens(&keys, &mem)
    }

    /// Query decoding over explicit key and value token sets `(B, N, C)`.
    pub fn forward_tokens(&self, keys: &Tensor, values: &Tensor) -> Result<DetectionSet> {
        let b = keys.dims()[0];
        let mut q = self
            .queries
            .as_tensor()
            .unsqueeze(0)?
            .broadcast_as((b, self.cfg.queries, self.channels))?
            .contiguous()?;
        let anchors = sigmoid(self.anchors.as_tensor())?;
        let qpos = self.query_pos.forward(&point_encoding(&anchors, self.channels)?)?.unsqueeze(0)?;
        for blk in &self.blocks {
            let n = blk.ln_self.forward(&q)?;
            let nq = n.broadcast_add(&qpos)?;
            q = (&q + blk.self_attn.forward(&nq, &nq, &n)?)?;
            let n = blk.ln_cross.forward(&q)?.broadcast_add(&qpos)?;
            q = (&q + blk.cross_attn.forward(&n, keys, values)?)?;
            q = (&q + blk.mlp.forward(&blk.ln_mlp.forward(&q)?)?)?;
        }
        let h = self.ln_out.forward(&q)?;
        let logits = self.cls_head.forward(&h)?;
        let raw = self.box_head.forward(&h)?;
        Ok(DetectionSet {
            logits,
            reg: self.decode_reg(&raw)?,
        })
    }

    /// Raw head outputs to regression space: centers are offsets from the
    /// query anchor in logit space, squashed into the world extent; height
    /// goes into `[0, z_max]`; the rest passes through.
    fn decode_reg(&self, raw: &Tensor) -> Result<Tensor> {
        let e = self.cfg.extent_m;
        let logit = raw.narrow(D::Minus1, 0, 2)?.broadcast_add(&self.anchors.as_tensor().unsqueeze(0)?)?;
        let xy = ((sigmoid(&logit)? * (2.0 * e))? - e)?;
        let z = (sigmoid(&raw.narrow(D::Minus1, 2, 1)?)? * self.cfg.z_max_m)?;
        let rest = raw.narrow(D::Minus1, 3, BOX_DIM - 3)?;
        Ok(Tensor::cat(&[&xy, &z, &rest], D::Minus1)?)
    }
}

/// Initial anchors: a sunflower spiral over a disk of `radius` (a fraction of
/// the extent), returned as logits of the unit-square position.
fn anchor_logits(n: usize, radius: f64) -> Vec<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .flat_map(|i| {
            let r = radius * ((i as f64 + 0.5) / n as f64).sqrt();
            let a = i as f64 * golden;
            [r * a.cos(), r * a.sin()].map(|p| {
                let u = 0.5 * (p + 1.0);
                (u / (1.0 - u)).ln()
            })
        })
        .collect()
}

/// Sine-cosine features of points in `[0, 1]^2`, `(N, 2) -> (N, c)`.
fn point_encoding(points: &Tensor, c: usize) -> Result<Tensor> {
    let f = c / 4;
    let freqs: Vec<f64> = (0..f)
        .map(|i| 2.0 * std::f64::consts::PI * 10000f64.powf(-(i as f64) / f as f64) * 8.0)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, 1, f), points.device())?.to_dtype(points.dtype())?;
    let ang = points.unsqueeze(2)?.broadcast_mul(&freqs)?;
    let n = points.dims()[0];
    let enc = Tensor::cat(&[ang.sin()?, ang.cos()?], 2)?.reshape((n, 4 * f))?;
    if 4 * f == c {
        Ok(enc)
    } else {
        Ok(enc.pad_with_zeros(1, 0, c - 4 * f)?)
    }
}

/// Query-to-object assignment for one scene: `(query, gt)` pairs.
pub type Assignment = Vec<(usize, usize)>;

/// Matching cost `[gt][query]`.
pub fn match_cost(probs: &[Vec<f64>], reg: &[Vec<f64>], gts: &[GtBox], lambda_cls: f64, lambda_box: f64) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| {
            let t = g.target();
            probs
                .iter()
                .zip(reg)
                .map(|(p, r)| {
                    let l1: f64 = (0..MATCH_DIM).map(|d| (r[d] - t[d]).abs()).sum::<f64>() / MATCH_DIM as f64;
                    -lambda_cls * p[g.class_id] + lambda_box * l1
                })
                .collect()
        })
        .collect()
}

/// Exact minimum-cost injective assignment of ground truth to queries.
pub fn hungarian_match(
    probs: &[Vec<f64>],
    reg: &[Vec<f64>],
    gts: &[GtBox],
    lambda_cls: f64,
    lambda_box: f64,
) -> Assignment {
    if gts.is_empty() || probs.is_empty() {
        return Vec::new();
    }
    let cost = match_cost(probs, reg, gts, lambda_cls, lambda_box);
    let mut pairs: Vec<(usize, usize)> = hungarian::solve(&cost).into_iter().map(|(g, q)| (q, g)).collect();
    pairs.sort_unstable();
    pairs
}

/// Softmax focal loss averaged over rows. `targets[i]` indexes the class of
/// row `i` in `logits (N, K + 1)`.
pub fn focal_loss(logits: &Tensor, targets: &[usize], alpha: f64, gamma: f64) -> Result<Tensor> {
    let (n, k1) = logits.dims2()?;
    if targets.len() != n {
        return Err(MbevError::ShapeMismatch(format!("{} targets for {n} rows", targets.len())));
    }
    let mut onehot = vec![0.0f64; n * k1];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * k1 + t] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k1), logits.device())?.to_dtype(logits.dtype())?;
    let logp = (log_softmax_last(logits)? * &onehot)?.sum(D::Minus1)?;
    let p = logp.exp()?;
    let modulator = if gamma == 0.0 {
        p.ones_like()?
    } else {
        ((p.neg()? + 1.0)?.clamp(1e-12, 1.0)?.log()? * gamma)?.exp()?
    };
    Ok(((modulator * logp)? * (-alpha))?.mean_all()?)
}

/// Loss pieces for one batch.
#[derive(Debug, Clone)]
pub struct DetLoss {
    pub total: Tensor,
    pub focal: f64,
    pub l1: f64,
    pub matched: usize,
}

/// `w_cls * focal + w_box * mean L1` over matched boxes, matching each scene
/// with [`hungarian_match`].
pub fn det_loss(preds: &DetectionSet, gts: &[Vec<GtBox>], cfg: &LossConfig) -> Result<DetLoss> {
    let (probs, reg) = preds.to_host()?;
    let assignments: Vec<Assignment> = probs
        .iter()
        .zip(&reg)
        .zip(gts)
        .map(|((p, r), g)| hungarian_match(p, r, g, cfg.match_cls, cfg.match_box))
        .collect();
    det_loss_with(preds, gts, &assignments, cfg)
}

pub fn det_loss_with(
    preds: &DetectionSet,
    gts: &[Vec<GtBox>],
    assignments: &[Assignment],
    cfg: &LossConfig,
) -> Result<DetLoss> {
    let (b, q, k1) = preds.logits.dims3()?;
    if gts.len() != b || assignments.len() != b {
        return Err(MbevError::ShapeMismatch(format!(
            "{b} predictions, {} gt sets, {} assignments",
            gts.len(),
            assignments.len()
        )));
    }
    let mut targets = vec![k1 - 1; b * q];
    let mut rows = Vec::new();
    let mut box_t = Vec::new();
    for (s, (assign, g)) in assignments.iter().zip(gts).enumerate() {
        for &(qi, gi) in assign {
            targets[s * q + qi] = g[gi].class_id;
            rows.push((s * q + qi) as u32);
            box_t.extend_from_slice(&g[gi].target());
        }
    }
    let dev = preds.logits.device();
    let focal = focal_loss(
        &preds.logits.reshape((b * q, k1))?,
        &targets,
        cfg.focal_alpha,
        cfg.focal_gamma,
    )?;
    let mut total = (&focal * cfg.w_cls)?;
    let mut l1_val = 0.0;
    if !rows.is_empty() {
        let n = rows.len();
        let idx = Tensor::from_vec(rows, n, dev)?;
        let pred = preds.reg.reshape((b * q, BOX_DIM))?.index_select(&idx, 0)?;
        let tgt = Tensor::from_vec(box_t, (n, BOX_DIM), &Device::Cpu)?.to_dtype(pred.dtype())?;
        let l1 = (pred - tgt)?.abs()?.mean_all()?;
        l1_val = l1.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total = (total + (l1 * cfg.w_box)?)?;
    }
    Ok(DetLoss {
        focal: focal.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        l1: l1_val,
        matched: assignments.iter().map(Vec::len).sum(),
        total,
    })
}

/// One line of a prediction export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene: u64,
    pub query: usize,
    #[serde(flatten)]
    pub pred: PredBox,
}

/// Writes predictions as JSON lines, one per (scene, query).
pub fn export_predictions<W: Write>(mut w: W, scene_ids: &[u64], preds: &[Vec<PredBox>]) -> Result<()> {
    for (&scene, ps) in scene_ids.iter().zip(preds) {
        for (query, pred) in ps.iter().enumerate() {
            let rec = PredictionRecord {
                scene,
                query,
                pred: *pred,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::world::make_rig;

    fn det(dtype: DType) -> Detector {
        let rig = make_rig(6, 70.0, 60.0, 1.5, (32, 64)).unwrap();
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Detector::new(
            &mut store,
            DetectorConfig::default(),
            16,
            (4, 8),
            &rig,
            &FrustumConfig::default(),
            &mut rng,
        )
        .unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap())
    }

    fn gt(class_id: usize, x: f64, y: f64) -> GtBox {
        GtBox {
            class_id,
            center: [x, y, 0.8],
            size: [4.5, 1.9, 1.6],
            yaw: 0.3,
            velocity: [1.0, 0.0],
        }
    }

    #[test]
    fn focal_spot_values() {
        let dev = Device::Cpu;
        let even = Tensor::new(&[[0.0f64, 0.0]], &dev).unwrap();
        let l = scalar(&focal_loss(&even, &[0], 0.25, 2.0).unwrap());
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);

        let sure = Tensor::new(&[[80.0f64, 0.0, 0.0]], &dev).unwrap();
        assert!(scalar(&focal_loss(&sure, &[0], 0.25, 2.0).unwrap()) < 1e-30);

        let logits = Tensor::new(&[[0.3f64, -1.2, 2.0], [1.0, 0.1, -0.4]], &dev).unwrap();
        let rows = logits.to_vec2::<f64>().unwrap();
        let ce: f64 = [(0usize, 2usize), (1, 0)]
            .iter()
            .map(|&(i, t)| {
                let z: f64 = rows[i].iter().map(|v| v.exp()).sum();
                -(rows[i][t].exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        let fl = scalar(&focal_loss(&logits, &[2, 0], 1.0, 0.0).unwrap());
        assert!((fl - ce).abs() < 1e-12);
    }

    #[test]
    fn output_shapes() {
        let d = det(DType::F32);
        let f = Tensor::randn(0f32, 1.0, (1, 6, 2, 4, 8, 16), &Device::Cpu).unwrap();
        let out = d.forward(&f).unwrap();
        assert_eq!(out.logits.dims(), &[1, 30, 5]);
        assert_eq!(out.reg.dims(), &[1, 30, 10]);
        assert_eq!(out.decode().unwrap()[0].len(), 30);
    }

    #[test]
    fn zero_heads_sit_on_the_anchors() {
        let mut d = det(DType::F64);
        let mut store = ParamStore::new(DType::F64);
        d.cls_head = Linear::zeros(&mut store, "c", 16, 5).unwrap();
        d.box_head.fc2 = Linear::zeros(&mut store, "b", 16, 10).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 6, 2, 4, 8, 16), &Device::Cpu).unwrap();
        let out = d.forward(&f).unwrap();
        assert_eq!(scalar(&out.logits.abs().unwrap().max_all().unwrap()), 0.0);
        let boxes = out.boxes().unwrap().to_vec3::<f64>().unwrap();
        let anchors = d.anchors.as_tensor().to_vec2::<f64>().unwrap();
        for scene in &boxes {
            for (b, a) in scene.iter().zip(&anchors) {
                for i in 0..2 {
                    let want = 50.0 * (2.0 / (1.0 + (-a[i]).exp()) - 1.0);
                    assert!((b[i] - want).abs() < 1e-9);
                }
                assert_eq!(&b[2..], &[2.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn token_order_does_not_matter() {
        let d = det(DType::F64);
        let dev = Device::Cpu;
        let keys = Tensor::randn(0f64, 1.0, (1, 20, 16), &dev).unwrap();
        let vals = Tensor::randn(0f64, 1.0, (1, 20, 16), &dev).unwrap();
        let perm: Vec<u32> = (0..20).rev().collect();
        let idx = Tensor::new(perm.as_slice(), &dev).unwrap();
        let a = d.forward_tokens(&keys, &vals).unwrap();
        let b = d
            .forward_tokens(&keys.index_select(&idx, 1).unwrap(), &vals.index_select(&idx, 1).unwrap())
            .unwrap();
        assert!(max_diff(&a.logits, &b.logits) < 1e-10);
        assert!(max_diff(&a.reg, &b.reg) < 1e-10);
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let d = det(DType::F64);
        let dev = Device::Cpu;
        let f = Tensor::randn(0f64, 1.0, (1, 6, 2, 4, 8, 16), &dev).unwrap();
        let a = d.forward(&f).unwrap();
        let perm: Vec<u32> = (0..30).map(|i| (i * 7 + 3) % 30).collect();
        let idx = Tensor::new(perm.as_slice(), &dev).unwrap();
        let q = d.queries.as_tensor().index_select(&idx, 0).unwrap();
        d.queries.set(&q).unwrap();
        let an = d.anchors.as_tensor().index_select(&idx, 0).unwrap();
        d.anchors.set(&an).unwrap();
        let b = d.forward(&f).unwrap();
        assert!(max_diff(&a.logits.index_select(&idx, 1).unwrap(), &b.logits) < 1e-10);
        assert!(max_diff(&a.reg.index_select(&idx, 1).unwrap(), &b.reg) < 1e-10);
    }

    #[test]
    fn anchors_cover_the_disk() {
        let d = det(DType::F64);
        let pts = sigmoid(d.anchors.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for p in &pts {
            let r = ((2.0 * p[0] - 1.0).powi(2) + (2.0 * p[1] - 1.0).powi(2)).sqrt() * 50.0;
            assert!(r <= 32.0 + 1e-9);
        }
        let far = pts.iter().filter(|p| (2.0 * p[0] - 1.0).hypot(2.0 * p[1] - 1.0) * 50.0 > 20.0).count();
        assert!(far >= 10, "{far}");
    }

    #[test]
    fn crossed_match() {
        let gts = [gt(0, 10.0, 0.0), gt(0, -10.0, 5.0)];
        let mut reg = vec![gts[1].target().to_vec(), gts[0].target().to_vec()];
        reg[0][0] += 0.5;
        let probs = vec![vec![0.9, 0.1], vec![0.9, 0.1]];
        let a = hungarian_match(&probs, &reg, &gts, 2.0, 0.25);
        assert_eq!(a, vec![(0, 1), (1, 0)]);
        assert_eq!(hungarian_match(&probs[..1], &reg[..1], &gts[..1], 1.0, 1.0), vec![(0, 0)]);
        assert!(hungarian_match(&probs, &reg, &[], 1.0, 1.0).is_empty());
    }

    fn set_from(logits: Vec<f64>, reg: Vec<f64>, q: usize, k1: usize) -> DetectionSet {
        let dev = Device::Cpu;
        DetectionSet {
            logits: Tensor::from_vec(logits, (1, q, k1), &dev).unwrap(),
            reg: Tensor::from_vec(reg, (1, q, BOX_DIM), &dev).unwrap(),
        }
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let g = gt(2, 5.0, -3.0);
        let mut logits = vec![-100.0; 2 * 5];
        logits[2] = 100.0;
        logits[5 + 4] = 100.0;
        let mut reg = g.target().to_vec();
        reg.extend([0.0; BOX_DIM]);
        let preds = set_from(logits, reg, 2, 5);
        let l = det_loss(&preds, &[vec![g]], &LossConfig::default()).unwrap();
        assert_eq!(l.matched, 1);
        assert!(scalar(&l.total) < 1e-12);

        let mut empty = vec![-100.0; 3 * 5];
        for q in 0..3 {
            empty[q * 5 + 4] = 100.0;
        }
        let preds = set_from(empty, vec![0.0; 3 * BOX_DIM], 3, 5);
        let l = det_loss(&preds, &[vec![]], &LossConfig::default()).unwrap();
        assert_eq!(l.matched, 0);
        assert!(scalar(&l.total) < 1e-12);
    }

    #[test]
    fn box_term_is_mean_absolute_residual() {
        let g = gt(1, 3.0, 4.0);
        let reg: Vec<f64> = g.target().iter().map(|v| v + 0.1).collect();
        let mut logits = vec![0.0; 5];
        logits[1] = 100.0;
        let preds = set_from(logits, reg, 1, 5);
        let cfg = LossConfig {
            w_cls: 0.0,
            w_box: 1.0,
            ..LossConfig::default()
        };
        let l = det_loss(&preds, &[vec![g]], &cfg).unwrap();
        assert!((l.l1 - 0.1).abs() < 1e-12);
        assert!((scalar(&l.total) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn prediction_export_round_trip() {
        let p = PredBox {
            score: 0.75,
            class_id: 3,
            center: [1.0, -2.0, 0.5],
            size: [0.8, 0.8, 1.8],
            yaw: -1.25,
            velocity: [0.5, 0.25],
        };
        let mut buf = Vec::new();
        export_predictions(&mut buf, &[7, 8], &[vec![p], vec![p, p]]).unwrap();
        let recs = read_predictions(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].scene, 8);
        assert_eq!(recs[2].query, 1);
        assert_eq!(recs[0].pred, p);
    }
}
