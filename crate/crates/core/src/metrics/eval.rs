//! Evaluation of a trained model under sets of failure patterns.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::detection::{GtBox, PredBox};
use crate::error::Result;
use crate::masking::MaskPattern;
use crate::model::{Completion, Model};
use crate::world::Dataset;

/// Encoder features of an evaluation split, computed once and shared by
/// every condition.
pub struct EvalSet {
    /// Detached batches `(B, V, T, Hf, Wf, C)`.
    pub features: Vec<Tensor>,
    pub gts: Vec<Vec<GtBox>>,
}

impl EvalSet {
    pub fn encode(model: &Model, ds: &Dataset, batch: usize) -> Result<Self> {
        let mut features = Vec::new();
        for chunk in ds.frames.chunks(batch.max(1)) {
            let refs: Vec<_> = chunk.iter().collect();
            features.push(model.encode(&refs)?.detach());
        }
        let gts = ds
            .scenes
            .iter()
            .map(|s| s.objects.iter().map(GtBox::from).collect())
            .collect();
        Ok(Self { features, gts })
    }

    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }
}

/// Decoded predictions for every scene with the same pattern applied to all.
pub fn predict(model: &Model, set: &EvalSet, pattern: &MaskPattern, mode: Completion) -> Result<Vec<Vec<PredBox>>> {
    let mut out = Vec::with_capacity(set.len());
    for f in &set.features {
        let patterns = vec![*pattern; f.dims()[0]];
        let (completed, _) = model.complete(f, &patterns, mode)?;
        out.extend(model.detect(&completed)?.decode()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternResult {
    pub pattern: String,
    pub report: MetricsReport,
}

/// Metrics averaged over a pattern set, with the per-pattern breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub label: String,
    pub mode: Completion,
    pub mean: MetricsReport,
    pub per_pattern: Vec<PatternResult>,
}

/// Runs every pattern over the whole split and averages the reports.
pub fn eval_condition(
    model: &Model,
    set: &EvalSet,
    label: &str,
    patterns: &[MaskPattern],
    mode: Completion,
) -> Result<ConditionReport> {
    let k = model.cfg.detector.num_classes;
    let mut per_pattern = Vec::with_capacity(patterns.len());
    for p in patterns {
        let preds = predict(model, set, p, mode)?;
        per_pattern.push(PatternResult {
            pattern: p.label(),
            report: evaluate(&preds, &set.gts, k),
        });
    }
    let reports: Vec<MetricsReport> = per_pattern.iter().map(|r| r.report.clone()).collect();
    Ok(ConditionReport {
        label: label.to_string(),
        mode,
        mean: MetricsReport::mean(&reports),
        per_pattern,
    })
}
