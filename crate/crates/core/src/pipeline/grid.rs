//! The experiment grid: trains (or reuses) every model the comparisons need,
//! evaluates them under failure patterns and writes the reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{cache_features, recon_quality, ReconQuality};
use super::{checkpoint_path, reusable, save_checkpoint, CheckpointMeta, ExperimentConfig, Phase, PhaseConfig, Splits};
use crate::error::Result;
use crate::masking::{enumerate_patterns, random_pattern, MaskPattern, MAX_MASKED};
use crate::metrics::eval::{eval_condition, ConditionReport, EvalSet};
use crate::metrics::flops::{flop_count, FlopBreakdown};
use crate::metrics::MetricsReport;
use crate::model::{Completion, Model, ModelConfig};
use crate::mvr::MvrVariant;
use crate::world::{NUM_VIEWS, VIEW_NAMES};

/// A trained model together with the key that identifies how it was made.
pub struct Trained {
    pub model: Model,
    pub meta: CheckpointMeta,
}

fn key_of(parts: &serde_json::Value) -> String {
    parts.to_string()
}

/// Runs `train` unless `dir/name.ckpt` was produced from the same inputs.
fn cached(
    dir: &Path,
    name: &str,
    key: String,
    train: impl FnOnce() -> Result<(Model, CheckpointMeta)>,
) -> Result<Trained> {
    let path = checkpoint_path(dir, name);
    if let Some((model, meta)) = reusable(&path, &key)? {
        log::info!("reusing {}", path.display());
        return Ok(Trained { model, meta });
    }
    log::info!("training {name}");
    let (model, mut meta) = train()?;
    meta.key = key;
    save_checkpoint(&model, &meta, &path)?;
    Ok(Trained { model, meta })
}

fn meta(phase: Phase, model: &ModelConfig, cfg: &PhaseConfig, seed: u64, log: super::TrainLog) -> CheckpointMeta {
    let steps = log.epochs.iter().map(|e| e.steps).sum();
    CheckpointMeta {
        phase,
        model: model.clone(),
        phase_config: cfg.clone(),
        seed,
        epochs: log.epochs.len(),
        steps,
        key: String::new(),
        log,
    }
}

pub fn baseline(cfg: &ExperimentConfig, splits: &Splits, dir: &Path) -> Result<Trained> {
    // The baseline never uses the reconstruction module; its config is kept
    // out of the key so every variant shares one baseline.
    let mut model_cfg = cfg.model.clone();
    model_cfg.mvr = Default::default();
    let key = key_of(&serde_json::json!({
        "phase": "baseline",
        "data": cfg.data,
        "encoder": model_cfg.encoder,
        "detector": model_cfg.detector,
        "rig": model_cfg.rig,
        "frustum": model_cfg.frustum,
        "train": cfg.baseline,
        "seed": cfg.seed,
    }));
    cached(dir, "baseline", key, || {
        let (model, log) = super::train_baseline(&model_cfg, &cfg.baseline, &splits.train, cfg.seed)?;
        Ok((model, meta(Phase::Baseline, &model_cfg, &cfg.baseline, cfg.seed, log)))
    })
}

/// Reconstruction pretraining of `model_cfg`'s MVR on top of `parent`.
pub fn pretrained(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    parent: &Trained,
    splits: &Splits,
    dir: &Path,
    name: &str,
) -> Result<Trained> {
    let key = key_of(&serde_json::json!({
        "phase": "pretrain",
        "parent": parent.meta.key,
        "mvr": model_cfg.mvr,
        "train": cfg.pretrain,
        "seed": cfg.seed,
    }));
    cached(dir, name, key, || {
        let mut model = Model::new(model_cfg.clone(), cfg.seed, parent.model.dtype())?;
        model.load_shared(&parent.model.to_table(serde_json::Value::Null)?)?;
        let log = super::pretrain(&mut model, &cfg.pretrain, &splits.train, cfg.seed)?;
        let m = meta(Phase::Pretrain, model_cfg, &cfg.pretrain, cfg.seed, log);
        Ok((model, m))
    })
}

pub fn finetuned(
    cfg: &ExperimentConfig,
    parent: &Trained,
    splits: &Splits,
    dir: &Path,
    name: &str,
    mode: Completion,
) -> Result<Trained> {
    let key = key_of(&serde_json::json!({
        "phase": "finetune",
        "parent": parent.meta.key,
        "mode": mode,
        "mvr": parent.meta.model.mvr,
        "train": cfg.finetune,
        "seed": cfg.seed,
    }));
    cached(dir, name, key, || {
        let mut model = parent.model.duplicate()?;
        let log = super::finetune(&mut model, &cfg.finetune, &splits.train, cfg.seed, mode)?;
        let m = meta(Phase::Finetune, &model.cfg, &cfg.finetune, cfg.seed, log);
        Ok((model, m))
    })
}

fn with_mvr(cfg: &ModelConfig, f: impl FnOnce(&mut crate::mvr::MvrConfig)) -> ModelConfig {
    let mut c = cfg.clone();
    f(&mut c.mvr);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleViewRow {
    pub view: usize,
    pub name: String,
    pub baseline: MetricsReport,
    pub mbev: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub patterns: usize,
    pub baseline: MetricsReport,
    pub local: MetricsReport,
    pub global: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub label: String,
    pub flops: FlopBreakdown,
    pub mvr_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seed: u64,
    /// No-failure evaluation of the baseline and of the Local model.
    pub no_failure: Vec<LabeledReport>,
    pub single_view: Vec<SingleViewRow>,
    pub sweep: Vec<SweepRow>,
    /// Full model and its ablations, single-view failures averaged.
    pub ablations: Vec<LabeledReport>,
    pub ratios: Vec<LabeledReport>,
    pub flops: Vec<FlopRow>,
    /// Per-epoch reconstruction loss of Local pretraining.
    pub pretrain_loss: Vec<f64>,
    pub recon: ReconQuality,
}

impl GridReport {
    pub fn ablation(&self, label: &str) -> Option<&MetricsReport> {
        self.ablations.iter().find(|a| a.label == label).map(|a| &a.report)
    }
}

/// Held-out patterns for reconstruction quality: one random pattern with
/// 1..=5 failed views per scene.
fn heldout_patterns(n: usize, seed: u64) -> Vec<MaskPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(21);
    (0..n).map(|i| random_pattern(&mut rng, 1 + i % MAX_MASKED)).collect()
}

fn eval(model: &Model, set: &EvalSet, label: &str, pats: &[MaskPattern], mode: Completion) -> Result<ConditionReport> {
    let r = eval_condition(model, set, label, pats, mode)?;
    log::info!("{label}: mAP {:.4} NDS {:.4}", r.mean.map, r.mean.nds);
    Ok(r)
}

/// Trains whatever is missing under `dir` and evaluates the full grid.
pub fn run_grid(cfg: &ExperimentConfig, splits: &Splits, dir: &Path) -> Result<GridReport> {
    cfg.validate()?;
    let local_cfg = with_mvr(&cfg.model, |m| m.variant = MvrVariant::Local);
    let global_cfg = with_mvr(&cfg.model, |m| m.variant = MvrVariant::Global);
    let nope_cfg = with_mvr(&local_cfg, |m| m.pe_enabled = false);

    let base = baseline(cfg, splits, dir)?;
    let pre_local = pretrained(cfg, &local_cfg, &base, splits, dir, "pretrain-local")?;
    let pre_global = pretrained(cfg, &global_cfg, &base, splits, dir, "pretrain-global")?;
    let pre_nope = pretrained(cfg, &nope_cfg, &base, splits, dir, "pretrain-local-nope")?;
    let local = finetuned(cfg, &pre_local, splits, dir, "finetune-local", Completion::Reconstruct)?;
    let global = finetuned(cfg, &pre_global, splits, dir, "finetune-global", Completion::Reconstruct)?;
    let nope = finetuned(cfg, &pre_nope, splits, dir, "finetune-local-nope", Completion::Reconstruct)?;
    let no_mvr = finetuned(cfg, &base, splits, dir, "finetune-no-mvr", Completion::MaskToken)?;

    let batch = cfg.grid.eval_batch;
    // Every model shares nothing in the encoder after finetuning, so each
    // gets its own feature cache.
    let set_of = |m: &Model| EvalSet::encode(m, &splits.eval, batch);
    let base_set = set_of(&base.model)?;
    let local_set = set_of(&local.model)?;

    let none = [MaskPattern::none()];
    let no_failure = vec![
        LabeledReport {
            label: "baseline".into(),
            report: eval(&base.model, &base_set, "no-failure baseline", &none, Completion::MaskToken)?.mean,
        },
        LabeledReport {
            label: "local".into(),
            report: eval(&local.model, &local_set, "no-failure local", &none, Completion::Reconstruct)?.mean,
        },
    ];

    let singles = enumerate_patterns(1)?;
    let mut single_view = Vec::with_capacity(NUM_VIEWS);
    for (v, p) in singles.iter().enumerate() {
        let b = eval(&base.model, &base_set, &format!("baseline -{}", VIEW_NAMES[v]), &[*p], Completion::MaskToken)?;
        let m = eval(&local.model, &local_set, &format!("local -{}", VIEW_NAMES[v]), &[*p], Completion::Reconstruct)?;
        single_view.push(SingleViewRow {
            view: v,
            name: VIEW_NAMES[v].to_string(),
            baseline: b.mean,
            mbev: m.mean,
        });
    }
    let mean_of = |rows: &[MetricsReport]| MetricsReport::mean(rows);
    let single_base = mean_of(&single_view.iter().map(|r| r.baseline.clone()).collect::<Vec<_>>());
    let single_local = mean_of(&single_view.iter().map(|r| r.mbev.clone()).collect::<Vec<_>>());

    let global_set = set_of(&global.model)?;
    let mut sweep = Vec::new();
    for k in 1..=MAX_MASKED {
        let pats = enumerate_patterns(k)?;
        let (b, l) = if k == 1 {
            (single_base.clone(), single_local.clone())
        } else {
            (
                eval(&base.model, &base_set, &format!("baseline k={k}"), &pats, Completion::MaskToken)?.mean,
                eval(&local.model, &local_set, &format!("local k={k}"), &pats, Completion::Reconstruct)?.mean,
            )
        };
        let g = if k == 1 || cfg.grid.global_sweep {
            Some(eval(&global.model, &global_set, &format!("global k={k}"), &pats, Completion::Reconstruct)?.mean)
        } else {
            None
        };
        sweep.push(SweepRow {
            k,
            patterns: pats.len(),
            baseline: b,
            local: l,
            global: g,
        });
    }
    drop(global_set);

    let mut ablations = vec![LabeledReport {
        label: "full".into(),
        report: single_local.clone(),
    }];
    let pre_set = set_of(&pre_local.model)?;
    ablations.push(LabeledReport {
        label: "no-finetune".into(),
        report: eval(&pre_local.model, &pre_set, "no-finetune", &singles, Completion::Reconstruct)?.mean,
    });
    drop(pre_set);
    let nope_set = set_of(&nope.model)?;
    ablations.push(LabeledReport {
        label: "no-pe".into(),
        report: eval(&nope.model, &nope_set, "no-pe", &singles, Completion::Reconstruct)?.mean,
    });
    drop(nope_set);
    let nomvr_set = set_of(&no_mvr.model)?;
    ablations.push(LabeledReport {
        label: "no-mvr".into(),
        report: eval(&no_mvr.model, &nomvr_set, "no-mvr", &singles, Completion::MaskToken)?.mean,
    });
    drop(nomvr_set);

    let mut ratios = Vec::new();
    for &rho in &cfg.grid.ratios {
        let label = format!("ratio {rho:.2}");
        let report = if (rho - local_cfg.mvr.mask_ratio).abs() < 1e-12 {
            single_local.clone()
        } else if cfg.grid.ratio_retrain {
            let rc = with_mvr(&local_cfg, |m| m.mask_ratio = rho);
            let tag = format!("{rho:.2}");
            let pre = pretrained(cfg, &rc, &base, splits, dir, &format!("pretrain-local-r{tag}"))?;
            let ft = finetuned(cfg, &pre, splits, dir, &format!("finetune-local-r{tag}"), Completion::Reconstruct)?;
            let set = set_of(&ft.model)?;
            eval(&ft.model, &set, &label, &singles, Completion::Reconstruct)?.mean
        } else {
            let mut m = local.model.duplicate()?;
            m.mvr.cfg.mask_ratio = rho;
            eval(&m, &local_set, &label, &singles, Completion::Reconstruct)?.mean
        };
        ratios.push(LabeledReport { label, report });
    }

    let one = MaskPattern::from_views(&[3]);
    let flops = [
        ("baseline", &local_cfg, MaskPattern::none()),
        ("local, 1 view", &local_cfg, one),
        ("global, 1 view", &global_cfg, one),
    ]
    .into_iter()
    .map(|(label, c, p)| {
        let f = flop_count(c, &p);
        FlopRow {
            label: label.into(),
            flops: f,
            mvr_fraction: f.mvr_fraction(),
        }
    })
    .collect();

    let heldout = cache_features(&pre_local.model, &splits.eval, batch)?;
    let pats = heldout_patterns(heldout.len(), cfg.seed);
    let recon = recon_quality(&pre_local.model, &heldout, &pats, batch)?;

    Ok(GridReport {
        seed: cfg.seed,
        no_failure,
        single_view,
        sweep,
        ablations,
        ratios,
        flops,
        pretrain_loss: pre_local.meta.log.objective(),
        recon,
    })
}

/// Writes `report.json`, a plain-text `report.txt` and `plot_data.csv`.
pub fn write_report(report: &GridReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("report.txt"), render_text(report))?;
    let mut csv = String::from("missing_views,metric,baseline,global,local\n");
    for row in &report.sweep {
        let g = |f: fn(&MetricsReport) -> f64| row.global.as_ref().map_or(String::new(), |r| format!("{:.5}", f(r)));
        let _ = writeln!(csv, "{},nds,{:.5},{},{:.5}", row.k, row.baseline.nds, g(|r| r.nds), row.local.nds);
        let _ = writeln!(csv, "{},map,{:.5},{},{:.5}", row.k, row.baseline.map, g(|r| r.map), row.local.map);
    }
    fs::write(dir.join("plot_data.csv"), csv)?;
    Ok(())
}

fn line(out: &mut String, label: &str, r: &MetricsReport) {
    let _ = writeln!(
        out,
        "  {label:<24} mAP {:.4}  NDS {:.4}  mATE {:.3}  mASE {:.3}  mAOE {:.3}",
        r.map, r.nds, r.mate, r.mase, r.maoe
    );
}

pub fn render_text(r: &GridReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed {}\n\n[no failure]", r.seed);
    for x in &r.no_failure {
        line(&mut out, &x.label, &x.report);
    }
    let _ = writeln!(out, "\n[single view missing]");
    for row in &r.single_view {
        line(&mut out, &format!("{} baseline", row.name), &row.baseline);
        line(&mut out, &format!("{} m-bev", row.name), &row.mbev);
    }
    let _ = writeln!(out, "\n[missing-view count]");
    for row in &r.sweep {
        line(&mut out, &format!("k={} baseline", row.k), &row.baseline);
        if let Some(g) = &row.global {
            line(&mut out, &format!("k={} global", row.k), g);
        }
        line(&mut out, &format!("k={} local", row.k), &row.local);
    }
    let _ = writeln!(out, "\n[ablations, single view averaged]");
    for x in r.ablations.iter().chain(&r.ratios) {
        line(&mut out, &x.label, &x.report);
    }
    let _ = writeln!(out, "\n[compute, MACs]");
    for f in &r.flops {
        let _ = writeln!(
            out,
            "  {:<24} encoder {:>12}  mvr {:>12}  detector {:>12}  mvr share {:.1}%",
            f.label,
            f.flops.encoder,
            f.flops.mvr,
            f.flops.detector,
            100.0 * f.mvr_fraction
        );
    }
    let _ = writeln!(
        out,
        "\n[reconstruction]\n  pretrain loss {:?}\n  held-out mse {:.5} vs mask-token fill {:.5}",
        r.pretrain_loss, r.recon.recon_mse, r.recon.fill_mse
    );
    out
}
