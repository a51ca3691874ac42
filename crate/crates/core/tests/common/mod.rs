//! Reference implementations and check suites shared by the integration
//! tests and the acceptance run. Every check returns `Err` with a message
//! describing the first disagreement.

#![allow(dead_code)]

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mbev::backbone::{Encoder, EncoderConfig};
use mbev::detection::{det_loss_with, focal_loss, hungarian_match, match_cost, Detector, DetectorConfig, GtBox, LossConfig};
use mbev::masking::MaskPattern;
use mbev::model::{Model, ModelConfig, RigConfig};
use mbev::mvr::{partition_columns, Mvr, MvrConfig, MvrVariant};
use mbev::nn::ParamStore;
use mbev::pipeline::{load_checkpoint, save_checkpoint, CheckpointMeta, Phase, PhaseConfig, TrainLog};
use mbev::positional::{sincos_2d_values, FrustumConfig};
use mbev::world::{generate_dataset, read_dataset, write_dataset, project_point, Rig, SceneConfig, NUM_TIMESTEPS, NUM_VIEWS};

pub type Check = std::result::Result<(), String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Masking ratios of the ablation sweep.
pub const SWEEP_RATIOS: [f64; 6] = [0.60, 0.64, 0.68, 0.72, 0.76, 0.80];

// ---------------------------------------------------------------------------
// Local assembly

/// Ego-frame point seen by `cam` at pixel column `u`, image mid-row, `dist` m away.
fn point_at_column(cam: &mbev::world::CameraSpec, u: f64, dist: f64) -> Vector3<f64> {
    let d_cam = Vector3::new((u - cam.cx) / cam.fx, 0.0, 1.0).normalize();
    let rt = cam.rotation.transpose();
    let origin = -(rt * cam.translation);
    origin + rt * d_cam * dist
}

/// For every view, the other view that sees the scene just beyond its left
/// edge and the one beyond its right edge, found by projecting points rather
/// than by index arithmetic. Also checks that the left neighbour sees those
/// points in its right half and the right neighbour in its left half.
pub fn geometric_neighbours(rig: &Rig) -> std::result::Result<Vec<(usize, usize)>, String> {
    let mut out = Vec::new();
    for (v, cam) in rig.cameras.iter().enumerate() {
        let w = cam.width as f64;
        let find = |u: f64, want_right_half: bool| -> std::result::Result<usize, String> {
            let p = point_at_column(cam, u, 25.0);
            let hits: Vec<(usize, f64)> = rig
                .cameras
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != v)
                .filter_map(|(i, c)| project_point(c, &p).map(|(pu, _, _)| (i, pu)))
                .collect();
            match hits.as_slice() {
                [(i, pu)] if (*pu > w / 2.0) == want_right_half => Ok(*i),
                _ => Err(format!("view {v}: edge column {u} seen by {hits:?}")),
            }
        };
        out.push((find(0.5, true)?, find(w - 0.5, false)?));
    }
    Ok(out)
}

/// Local planes computed with plain loops over host memory.
/// `feat[b][v][t][r][c][ch]` is row-major `(B, 6, 2, hf, wf, C)`.
pub fn brute_force_local_planes(
    feat: &[f32],
    dims: (usize, usize, usize, usize),
    patterns: &[MaskPattern],
    token: &[f32],
    neighbours: &[(usize, usize)],
    rho: f64,
) -> Vec<f32> {
    let (b, hf, wf, c) = dims;
    let at = |s: usize, v: usize, t: usize, r: usize, col: usize, ch: usize| {
        feat[((((s * NUM_VIEWS + v) * NUM_TIMESTEPS + t) * hf + r) * wf + col) * c + ch]
    };
    // Side width straight from the rule: round half the unmasked fraction,
    // at least one column.
    let side = (((1.0 - rho) * wf as f64 / 2.0).round() as usize).max(1);
    let mut out = Vec::new();
    for s in 0..b {
        for v in 0..NUM_VIEWS {
            if !patterns[s].is_masked(v) {
                continue;
            }
            let (left, right) = neighbours[v];
            for r in 0..hf {
                for col in 0..wf {
                    for ch in 0..c {
                        let src = if col < side {
                            Some((left, wf - side + col))
                        } else if col >= wf - side {
                            Some((right, col - (wf - side)))
                        } else {
                            None
                        };
                        let val = match src {
                            Some((nb, nc)) if !patterns[s].is_masked(nb) => {
                                let sum: f32 = (0..NUM_TIMESTEPS).map(|t| at(s, nb, t, r, nc, ch)).sum();
                                sum / NUM_TIMESTEPS as f32
                            }
                            _ => token[ch],
                        };
                        out.push(val);
                    }
                }
            }
        }
    }
    out
}

fn assembly_patterns() -> Vec<[MaskPattern; 2]> {
    let mut out = Vec::new();
    for v in 0..NUM_VIEWS {
        out.push([MaskPattern::from_views(&[v]), MaskPattern::from_views(&[v, (v + 1) % NUM_VIEWS])]);
        out.push([
            MaskPattern::from_views(&[v, (v + 2) % NUM_VIEWS, (v + 3) % NUM_VIEWS]),
            MaskPattern::none(),
        ]);
    }
    out.push([MaskPattern::from_views(&[0, 1, 2, 3, 4]), MaskPattern::from_views(&[5, 3])]);
    out
}

/// Local assembly against the brute force for every sweep ratio and feature
/// widths 4 through 16.
pub fn check_local_assembly() -> Check {
    let rig = RigConfig::default().build().map_err(fail)?;
    let neighbours = geometric_neighbours(&rig)?;
    let (hf, c, b) = (2, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &rho in &SWEEP_RATIOS {
        for wf in 4..=16 {
            let mut store = ParamStore::new(DType::F32);
            let cfg = MvrConfig {
                variant: MvrVariant::Local,
                mask_ratio: rho,
                decoder_layers: 1,
                decoder_dim: 4,
                heads: 1,
                mask_token_std: 1.0,
                ..MvrConfig::default()
            };
            let mvr = Mvr::new(&mut store, cfg, c, (hf, wf), &rig, &FrustumConfig::default(), &mut rng).map_err(fail)?;
            let token: Vec<f32> = mvr.mask_token.as_tensor().to_vec1().map_err(fail)?;
            let n = b * NUM_VIEWS * NUM_TIMESTEPS * hf * wf * c;
            let host: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let features = Tensor::from_vec(host.clone(), (b, NUM_VIEWS, NUM_TIMESTEPS, hf, wf, c), &Device::Cpu).map_err(fail)?;
            for patterns in assembly_patterns() {
                let got: Vec<f32> = mvr
                    .local_planes(&features, &patterns)
                    .and_then(|t| Ok(t.flatten_all()?.to_vec1()?))
                    .map_err(fail)?;
                let want = brute_force_local_planes(&host, (b, hf, wf, c), &patterns, &token, &neighbours, rho);
                if got.len() != want.len() {
                    return Err(format!("rho {rho} wf {wf}: {} values vs {}", got.len(), want.len()));
                }
                if let Some(i) = (0..got.len()).find(|&i| (got[i] - want[i]).abs() > 1e-6) {
                    return Err(format!(
                        "rho {rho} wf {wf} {:?}: element {i} is {} want {}",
                        patterns.iter().map(MaskPattern::label).collect::<Vec<_>>(),
                        got[i],
                        want[i]
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matching

/// Minimum total cost over every injective map of ground truths to queries.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], g: usize, used: &mut Vec<bool>) -> f64 {
        if g == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..used.len() {
            if !used[q] {
                used[q] = true;
                best = best.min(cost[g][q] + go(cost, g + 1, used));
                used[q] = false;
            }
        }
        best
    }
    let nq = cost.first().map_or(0, Vec::len);
    go(cost, 0, &mut vec![false; nq])
}

fn random_gt<R: Rng>(rng: &mut R, classes: usize) -> GtBox {
    GtBox {
        class_id: rng.random_range(0..classes),
        center: [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(0.0..2.0)],
        size: [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), rng.random_range(1.0..2.5)],
        yaw: rng.random_range(-3.0..3.0),
        velocity: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
    }
}

/// Hungarian matching against exhaustive search for up to five ground truths.
pub fn check_hungarian(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 4;
    for case in 0..instances {
        let n_gt = rng.random_range(0..=5usize);
        let n_q = n_gt + rng.random_range(0..=3usize);
        let gts: Vec<GtBox> = (0..n_gt).map(|_| random_gt(&mut rng, k)).collect();
        let probs: Vec<Vec<f64>> = (0..n_q)
            .map(|_| {
                let raw: Vec<f64> = (0..=k).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            })
            .collect();
        let reg: Vec<Vec<f64>> = (0..n_q)
            .map(|_| (0..10).map(|_| rng.random_range(-30.0..30.0)).collect())
            .collect();
        let assign = hungarian_match(&probs, &reg, &gts, 2.0, 0.25);
        if assign.len() != n_gt.min(n_q) {
            return Err(format!("case {case}: {} pairs for {n_gt} gt", assign.len()));
        }
        let mut qs: Vec<usize> = assign.iter().map(|p| p.0).collect();
        let mut gs: Vec<usize> = assign.iter().map(|p| p.1).collect();
        qs.sort_unstable();
        qs.dedup();
        gs.sort_unstable();
        gs.dedup();
        if qs.len() != assign.len() || gs.len() != assign.len() {
            return Err(format!("case {case}: assignment not injective {assign:?}"));
        }
        if n_gt == 0 {
            continue;
        }
        let cost = match_cost(&probs, &reg, &gts, 2.0, 0.25);
        let total: f64 = assign.iter().map(|&(q, g)| cost[g][q]).sum();
        let best = brute_force_min_cost(&cost);
        if (total - best).abs() > 1e-9 {
            return Err(format!("case {case}: cost {total} vs optimum {best}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spot values

fn scalar(t: &Tensor) -> std::result::Result<f64, String> {
    t.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).map_err(fail)
}

pub fn check_focal_spot_values() -> Check {
    let logits = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).map_err(fail)?;
    let v = scalar(&focal_loss(&logits, &[0], 0.25, 2.0).map_err(fail)?)?;
    let want = -0.25 * 0.25 * 0.5f64.ln();
    if (v - 0.04332).abs() > 5e-6 || (v - want).abs() > 1e-12 {
        return Err(format!("focal(p=0.5, gamma=2, alpha=0.25) = {v}, want 0.04332"));
    }
    let rows = [[1.5f64, -0.3, 0.2, 2.0, -1.0], [-0.7, 0.1, 0.4, 0.0, 3.0], [0.0, 0.0, 5.0, -2.0, 1.0]];
    let targets = [3usize, 4, 0];
    let logits = Tensor::new(&rows, &Device::Cpu).map_err(fail)?;
    let v = scalar(&focal_loss(&logits, &targets, 1.0, 0.0).map_err(fail)?)?;
    let ce: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, t)| {
            let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
            lse - r[t]
        })
        .sum::<f64>()
        / rows.len() as f64;
    if (v - ce).abs() > 1e-12 {
        return Err(format!("focal with gamma 0, alpha 1 is {v}, cross-entropy is {ce}"));
    }
    Ok(())
}

pub fn check_sincos_reference() -> Check {
    let (hf, wf, c) = (4, 5, 8);
    let t = sincos_2d_values(hf, wf, c).map_err(fail)?;
    let at = |r: usize, col: usize, ch: usize| t[(r * wf + col) * c + ch];
    let (s, co) = (at(3, 0, 0), at(3, 0, 1));
    if (s - 0.14112).abs() > 5e-6 || (co + 0.98999).abs() > 5e-6 {
        return Err(format!("row 3, col 0, first pair is ({s}, {co}), want (0.14112, -0.98999)"));
    }
    // Column half of the same cell: position 0 gives (0, 1) at every frequency.
    for k in 0..c / 4 {
        if at(3, 0, c / 2 + 2 * k) != 0.0 || at(3, 0, c / 2 + 2 * k + 1) != 1.0 {
            return Err(format!("column half of (3, 0) not (0, 1) at frequency {k}"));
        }
    }
    Ok(())
}

pub fn check_partition_examples() -> Check {
    for (wf, rho, want) in [(16, 0.76, (2, 12, 2)), (16, 0.60, (3, 10, 3)), (4, 0.76, (1, 2, 1)), (8, 0.80, (1, 6, 1))] {
        let got = partition_columns(wf, rho).map_err(fail)?;
        if got != want {
            return Err(format!("partition({wf}, {rho}) = {got:?}, want {want:?}"));
        }
    }
    if partition_columns(2, 0.76).is_ok() {
        return Err("two columns cannot hold a three-part split".into());
    }
    Ok(())
}

/// Budget invariant of the column split for arbitrary widths and ratios.
pub fn partition_invariant(wf: usize, rho: f64) -> Check {
    let ideal = (1.0 - rho) * wf as f64 / 2.0;
    match partition_columns(wf, rho) {
        Ok((l, m, r)) => {
            if l + m + r != wf || l != r || l == 0 || m == 0 {
                return Err(format!("{wf} columns at {rho}: {l}+{m}+{r}"));
            }
            if l > 1 && (l as f64 - ideal).abs() > 0.5 + 1e-9 {
                return Err(format!("{wf} columns at {rho}: side {l} far from {ideal}"));
            }
            Ok(())
        }
        Err(_) => {
            let side = (ideal.round() as usize).max(1);
            if wf >= 2 * side + 1 {
                Err(format!("{wf} columns at {rho} rejected although side {side} fits"))
            } else {
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradients

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences (h = 1e-5) against autograd for sampled coordinates of
/// every parameter under `prefixes`. The loss must be an `f64` scalar.
pub fn grad_check(
    store: &ParamStore,
    prefixes: &[&str],
    per_tensor: usize,
    loss: &dyn Fn() -> mbev::Result<Tensor>,
) -> std::result::Result<GradReport, String> {
    let h = 1e-5;
    let l0 = loss().map_err(fail)?;
    let grads = l0.backward().map_err(fail)?;
    let eval = || -> std::result::Result<f64, String> { scalar(&loss().map_err(fail)?) };
    let mut report = GradReport { checked: 0, max_rel: 0.0, worst: String::new() };
    let params = store.select(prefixes);
    if params.is_empty() {
        return Err(format!("no parameters under {prefixes:?}"));
    }
    for (name, var) in params {
        let shape = var.shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().and_then(|t| t.to_vec1()).map_err(fail)?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().and_then(|t| t.to_vec1()).map_err(fail)?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|i| i * (n - 1) / (per_tensor - 1).max(1)).collect()
        };
        let set = |var: &Var, vals: &[f64]| -> Check {
            var.set(&Tensor::from_slice(vals, &shape, &Device::Cpu).map_err(fail)?).map_err(fail)
        };
        let mut work = base.clone();
        for i in picks {
            work[i] = base[i] + h;
            set(&var, &work)?;
            let lp = eval()?;
            work[i] = base[i] - h;
            set(&var, &work)?;
            let lm = eval()?;
            work[i] = base[i];
            set(&var, &work)?;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: autograd {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> mbev::Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

const TINY_GRID: (usize, usize) = (2, 4);
const TINY_C: usize = 8;

fn tiny_features<R: Rng>(rng: &mut R) -> mbev::Result<Tensor> {
    random_tensor(rng, &[1, NUM_VIEWS, NUM_TIMESTEPS, TINY_GRID.0, TINY_GRID.1, TINY_C], 1.0)
}

/// Encoder with one block; the loss weights every output token by a fixed
/// random tensor so the output layer norm does not flatten it to a constant.
pub fn encoder_grad_check() -> std::result::Result<GradReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new(DType::F64);
    let cfg = EncoderConfig { patch: 2, channels: TINY_C, depth: 1, mlp_ratio: 2, frozen: false };
    let enc = Encoder::new(&mut store, cfg, &mut rng).map_err(fail)?;
    let patches = random_tensor(&mut rng, &[2, 2, 3, cfg.patch_dim()], 1.0).map_err(fail)?;
    let weights = random_tensor(&mut rng, &[2, 2, 3, TINY_C], 1.0).map_err(fail)?;
    grad_check(&store, &["encoder"], 8, &|| Ok((enc.forward_patches(&patches)? * &weights)?.sum_all()?))
}

/// Local reconstruction decoder (one layer, width 8) through the
/// reconstruction loss, with respect to the mask token and decoder weights.
pub fn mvr_grad_check() -> std::result::Result<GradReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let rig = RigConfig::default().build().map_err(fail)?;
    let mut store = ParamStore::new(DType::F64);
    let cfg = MvrConfig {
        variant: MvrVariant::Local,
        decoder_layers: 1,
        decoder_dim: 8,
        heads: 2,
        mask_token_std: 0.5,
        ..MvrConfig::default()
    };
    let mvr = Mvr::new(&mut store, cfg, TINY_C, TINY_GRID, &rig, &FrustumConfig::default(), &mut rng).map_err(fail)?;
    let features = tiny_features(&mut rng).map_err(fail)?;
    // Two adjacent failures so one side of each plane is mask tokens.
    let patterns = [MaskPattern::from_views(&[1, 2])];
    grad_check(&store, &["mvr"], 8, &|| {
        let r = mvr.reconstruct_batch(&features, &patterns)?.expect("failed views present");
        r.loss()
    })
}

/// Detection losses for two queries and one ground truth under a fixed
/// assignment.
pub fn detection_grad_check() -> std::result::Result<GradReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rig = RigConfig::default().build().map_err(fail)?;
    let mut store = ParamStore::new(DType::F64);
    let cfg = DetectorConfig { queries: 2, num_classes: 2, layers: 1, heads: 2, ..DetectorConfig::default() };
    let det = Detector::new(&mut store, cfg, TINY_C, TINY_GRID, &rig, &FrustumConfig::default(), &mut rng).map_err(fail)?;
    let features = tiny_features(&mut rng).map_err(fail)?;
    let gt = vec![vec![GtBox {
        class_id: 1,
        center: [7.3, -4.1, 0.9],
        size: [4.2, 1.9, 1.6],
        yaw: 0.4,
        velocity: [2.1, -0.6],
    }]];
    let assign = vec![vec![(1usize, 0usize)]];
    let loss_cfg = LossConfig::default();
    grad_check(&store, &["det"], 6, &|| {
        Ok(det_loss_with(&det.forward(&features)?, &gt, &assign, &loss_cfg)?.total)
    })
}

pub fn check_gradients() -> Check {
    for (label, report) in [
        ("encoder", encoder_grad_check()?),
        ("reconstruction", mvr_grad_check()?),
        ("detection", detection_grad_check()?),
    ] {
        if report.max_rel >= 1e-3 {
            return Err(format!("{label}: max relative error {:.2e} at {}", report.max_rel, report.worst));
        }
        if report.checked == 0 {
            return Err(format!("{label}: nothing checked"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Round trips

pub fn small_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.patch = 16;
    cfg.encoder.channels = 16;
    cfg.encoder.depth = 1;
    cfg.mvr.decoder_dim = 16;
    cfg.mvr.decoder_layers = 1;
    cfg.detector.queries = 8;
    cfg.detector.layers = 1;
    cfg
}

pub fn check_dataset_round_trip() -> Check {
    let rig = RigConfig::default().build().map_err(fail)?;
    let scenes = SceneConfig { n_scenes: 3, seed: 77, ..SceneConfig::default() };
    let ds = generate_dataset(&scenes, &rig).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("d.mbds");
    write_dataset(&ds, &path).map_err(fail)?;
    let back = read_dataset(&path).map_err(fail)?;
    if back != ds {
        return Err("dataset changed after write and read".into());
    }
    let bits = |d: &mbev::world::Dataset| -> Vec<u32> { d.frames.iter().flat_map(|f| f.data.iter().map(|x| x.to_bits())).collect() };
    if bits(&back) != bits(&ds) {
        return Err("pixel bits differ after round trip".into());
    }
    Ok(())
}

pub fn check_checkpoint_round_trip() -> Check {
    let cfg = small_model_config();
    let model = Model::new(cfg.clone(), 9, DType::F32).map_err(fail)?;
    let meta = CheckpointMeta {
        phase: Phase::Pretrain,
        model: cfg,
        phase_config: PhaseConfig::default(),
        seed: 9,
        epochs: 2,
        steps: 17,
        key: "round-trip".into(),
        log: TrainLog { phase: Phase::Pretrain, epochs: vec![] },
    };
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &meta, &path).map_err(fail)?;
    let (back, back_meta) = load_checkpoint(&path).map_err(fail)?;
    if back_meta != meta {
        return Err("checkpoint metadata changed".into());
    }
    let names: Vec<&str> = model.store.names().collect();
    if back.store.names().collect::<Vec<_>>() != names {
        return Err("parameter names differ".into());
    }
    for (name, var) in model.store.iter() {
        let a: Vec<u32> = bits_of(var.as_tensor())?;
        let b: Vec<u32> = bits_of(back.store.get(name).map_err(fail)?.as_tensor())?;
        if a != b {
            return Err(format!("{name} differs after round trip"));
        }
    }
    Ok(())
}

pub fn bits_of(t: &Tensor) -> std::result::Result<Vec<u32>, String> {
    let v: Vec<f32> = t.flatten_all().and_then(|t| t.to_dtype(DType::F32)?.to_vec1()).map_err(fail)?;
    Ok(v.iter().map(|x| x.to_bits()).collect())
}

// ---------------------------------------------------------------------------

/// Runs every oracle suite, returning the elapsed seconds and each outcome.
pub fn run_oracle_suites() -> (f64, Vec<(&'static str, Check)>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let partition = (|| {
        check_partition_examples()?;
        for _ in 0..2000 {
            partition_invariant(rng.random_range(1..=96), rng.random_range(0.01..0.99))?;
        }
        Ok(())
    })();
    let results = vec![
        ("local assembly vs brute force", check_local_assembly()),
        ("hungarian vs brute force", check_hungarian(300)),
        ("focal spot values", check_focal_spot_values()),
        ("sincos reference", check_sincos_reference()),
        ("gradient checks", check_gradients()),
        ("dataset round trip", check_dataset_round_trip()),
        ("checkpoint round trip", check_checkpoint_round_trip()),
        ("partition budget", partition),
    ];
    (start.elapsed().as_secs_f64(), results)
}

// ---------------------------------------------------------------------------
// Bypass

/// With no failed view, every completion mode yields detections bit-identical
/// to running the detector on the encoder output directly, and the
/// reconstruction term of the cost model is zero for both variants.
pub fn check_bypass(model: &Model, frames: &[&mbev::world::MultiViewFrame]) -> Check {
    use mbev::metrics::flops::flop_count;
    use mbev::model::Completion;
    let plain = model.detect(&model.encode(frames).map_err(fail)?).map_err(fail)?;
    let none = vec![MaskPattern::none(); frames.len()];
    for mode in [Completion::Reconstruct, Completion::MaskToken, Completion::Zeros] {
        let out = model.infer(frames, &none, mode).map_err(fail)?;
        if bits_of(&out.logits)? != bits_of(&plain.logits)? || bits_of(&out.reg)? != bits_of(&plain.reg)? {
            return Err(format!("{mode:?} changes detections with every view present"));
        }
    }
    for variant in [MvrVariant::Local, MvrVariant::Global] {
        let mut cfg = model.cfg.clone();
        cfg.mvr.variant = variant;
        let f = flop_count(&cfg, &MaskPattern::none());
        if f.mvr != 0 {
            return Err(format!("{variant:?} counts {} reconstruction MACs with nothing to reconstruct", f.mvr));
        }
    }
    Ok(())
}
