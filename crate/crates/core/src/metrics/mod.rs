//! Center-distance detection metrics: per-class AP over several distance
//! thresholds, true-positive errors and a reduced detection score.

pub mod eval;
pub mod flops;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detection::{GtBox, PredBox};

/// Center-distance thresholds (m) that AP is averaged over.
pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold (m) at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
/// Normalizers of translation, scale and orientation error.
pub const ERR_NORMS: [f64; 3] = [2.0, 1.0, PI];
/// Recall levels of the interpolated PR curve.
pub const RECALL_POINTS: usize = 40;

/// Outcome of matching one scene's predictions of a class to its objects.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchOutcome {
    /// `(pred, gt)` pairs.
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    /// Unmatched ground-truth indices.
    pub fn_: Vec<usize>,
}

pub fn bev_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Score-ordered indices; ties keep input order.
fn by_score(preds: &[PredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy matching in descending score order: each prediction takes the
/// nearest unmatched object of its class within `threshold_m`.
pub fn match_for_metrics(preds: &[PredBox], gts: &[GtBox], threshold_m: f64) -> MatchOutcome {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchOutcome::default();
    for i in by_score(preds) {
        let p = &preds[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.class_id == p.class_id)
            .map(|(j, g)| (j, bev_distance(&p.center, &g.center)))
            .filter(|&(_, d)| d <= threshold_m)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                out.tp.push((i, j));
            }
            None => out.fp.push(i),
        }
    }
    out.fn_ = (0..gts.len()).filter(|&j| !taken[j]).collect();
    out
}

/// Area under the interpolated precision-recall curve, sampled at recall
/// `1/40, 2/40, .., 1`. `hits` are TP flags in descending score order.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Running max from the right gives the interpolated precision.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 1..=RECALL_POINTS {
        let level = r as f64 / RECALL_POINTS as f64;
        while idx < curve.len() && curve[idx].0 < level - 1e-12 {
            idx += 1;
        }
        if idx < curve.len() {
            sum += curve[idx].1;
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-class AP at one threshold over a set of scenes, `None` for classes
/// without ground truth.
pub fn class_ap(preds: &[Vec<PredBox>], gts: &[Vec<GtBox>], class_id: usize, threshold_m: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let pc: Vec<PredBox> = p.iter().filter(|b| b.class_id == class_id).copied().collect();
        let m = match_for_metrics(&pc, g, threshold_m);
        scored.extend(m.tp.iter().map(|&(i, _)| (pc[i].score, true)));
        scored.extend(m.fp.iter().map(|&i| (pc[i].score, false)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let hits: Vec<bool> = scored.iter().map(|s| s.1).collect();
    Some(average_precision(&hits, n_gt))
}

/// Mean AP over classes with ground truth and all distance thresholds.
pub fn compute_map(preds: &[Vec<PredBox>], gts: &[Vec<GtBox>], num_classes: usize) -> f64 {
    evaluate(preds, gts, num_classes).map
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// `1 - IoU` of two boxes aligned at a common center and heading.
pub fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

pub fn nds_like(map: f64, errors: [f64; 3]) -> f64 {
    let tp: f64 = errors
        .iter()
        .zip(ERR_NORMS)
        .map(|(e, n)| 1.0 - (e / n).min(1.0))
        .sum();
    (4.0 * map + tp) / 7.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
    /// AP averaged over thresholds; `None` where the class has no objects.
    pub class_ap: Vec<Option<f64>>,
    pub n_scenes: usize,
}

impl MetricsReport {
    /// Field-wise weighted mean; per-class entries average over the reports
    /// where the class is present.
    pub fn weighted_mean(reports: &[(f64, &MetricsReport)]) -> MetricsReport {
        let total: f64 = reports.iter().map(|r| r.0).sum();
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|(w, r)| w * f(r)).sum::<f64>() / total;
        let n_classes = reports.iter().map(|r| r.1.class_ap.len()).max().unwrap_or(0);
        let class_ap = (0..n_classes)
            .map(|c| {
                let present: Vec<(f64, f64)> = reports
                    .iter()
                    .filter_map(|(w, r)| r.class_ap.get(c).copied().flatten().map(|a| (*w, a)))
                    .collect();
                let wsum: f64 = present.iter().map(|p| p.0).sum();
                (!present.is_empty()).then(|| present.iter().map(|(w, a)| w * a).sum::<f64>() / wsum)
            })
            .collect();
        MetricsReport {
            map: avg(&|r| r.map),
            mate: avg(&|r| r.mate),
            mase: avg(&|r| r.mase),
            maoe: avg(&|r| r.maoe),
            nds: avg(&|r| r.nds),
            class_ap,
            n_scenes: reports.first().map_or(0, |r| r.1.n_scenes),
        }
    }

    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let w: Vec<(f64, &MetricsReport)> = reports.iter().map(|r| (1.0, r)).collect();
        Self::weighted_mean(&w)
    }
}

/// Full report over a set of scenes. A class without true positives at the
/// error threshold contributes each error at its normalizer.
pub fn evaluate(preds: &[Vec<PredBox>], gts: &[Vec<GtBox>], num_classes: usize) -> MetricsReport {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut errs: Vec<[f64; 3]> = Vec::new();
    for c in 0..num_classes {
        let aps: Vec<f64> = DIST_THRESHOLDS
            .iter()
            .filter_map(|&t| class_ap(preds, gts, c, t))
            .collect();
        if aps.is_empty() {
            per_class.push(None);
            continue;
        }
        per_class.push(Some(aps.iter().sum::<f64>() / aps.len() as f64));

        let mut sums = [0.0; 3];
        let mut n = 0usize;
        for (p, g) in preds.iter().zip(gts) {
            let pc: Vec<PredBox> = p.iter().filter(|b| b.class_id == c).copied().collect();
            for (i, j) in match_for_metrics(&pc, g, TP_THRESHOLD).tp {
                let (pb, gb) = (&pc[i], &g[j]);
                sums[0] += bev_distance(&pb.center, &gb.center);
                sums[1] += scale_error(&pb.size, &gb.size);
                sums[2] += angle_diff(pb.yaw, gb.yaw);
                n += 1;
            }
        }
        errs.push(if n == 0 { ERR_NORMS } else { sums.map(|s| s / n as f64) });
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let mean_err = |k: usize| {
        if errs.is_empty() {
            ERR_NORMS[k]
        } else {
            errs.iter().map(|e| e[k]).sum::<f64>() / errs.len() as f64
        }
    };
    let (mate, mase, maoe) = (mean_err(0), mean_err(1), mean_err(2));
    MetricsReport {
        map,
        mate,
        mase,
        maoe,
        nds: nds_like(map, [mate, mase, maoe]),
        class_ap: per_class,
        n_scenes: preds.len(),
    }
}
