use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mbev::detection::export_predictions;
use mbev::masking::{enumerate_patterns, MaskPattern};
use mbev::metrics::eval::{eval_condition, predict, EvalSet};
use mbev::metrics::flops::flop_count;
use mbev::model::{Completion, Model};
use mbev::mvr::MvrVariant;
use mbev::pipeline::grid::write_report;
use mbev::pipeline::{
    checkpoint_path, finetune, load_checkpoint, load_or_generate_splits, pretrain, run_grid, save_checkpoint,
    train_baseline, write_splits, CheckpointMeta, ExperimentConfig, Phase, Splits,
};

#[derive(Parser)]
#[command(name = "mbev", about = "Masked view reconstruction for camera-failure-robust BEV detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; generated there when absent or stale.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Reconstruct,
    MaskToken,
    Zeros,
}

impl From<Mode> for Completion {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Reconstruct => Completion::Reconstruct,
            Mode::MaskToken => Completion::MaskToken,
            Mode::Zeros => Completion::Zeros,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and evaluation scenes.
    GenData(Common),
    /// Train encoder and detector without failures.
    TrainBaseline(Common),
    /// Train the reconstruction module on a frozen encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Joint detection and reconstruction training.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum, default_value = "reconstruct")]
        mode: Mode,
    },
    /// Evaluate a checkpoint under failure patterns.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Failed views, e.g. `3` or `0,3`; all patterns of `--k` otherwise.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, value_enum, default_value = "reconstruct")]
        mode: Mode,
    },
    /// Train every model of the comparison grid and write all reports.
    Grid(Common),
    /// Analytic compute of one inference per variant.
    Flops(Common),
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("config.toml"), cfg.to_toml()?)?;
    Ok(cfg)
}

fn splits(c: &Common, cfg: &ExperimentConfig) -> anyhow::Result<Splits> {
    let dir = c.data.clone().unwrap_or_else(|| c.out.join("data"));
    Ok(load_or_generate_splits(&cfg.data, &cfg.model, &dir)?)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn meta(phase: Phase, model: &Model, cfg: &ExperimentConfig, log: mbev::pipeline::TrainLog) -> CheckpointMeta {
    let phase_config = match phase {
        Phase::Baseline => cfg.baseline.clone(),
        Phase::Pretrain => cfg.pretrain.clone(),
        Phase::Finetune => cfg.finetune.clone(),
    };
    CheckpointMeta {
        phase,
        model: model.cfg.clone(),
        phase_config,
        seed: cfg.seed,
        epochs: log.epochs.len(),
        steps: log.epochs.iter().map(|e| e.steps).sum(),
        key: String::new(),
        log,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::GenData(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(s) = c.seed {
                cfg.data.seed = s;
            }
            let s = mbev::pipeline::generate_splits(&cfg.data, &cfg.model)?;
            write_splits(&s, &cfg.data, &c.out)?;
            println!("wrote {} train and {} eval scenes to {}", s.train.len(), s.eval.len(), c.out.display());
        }
        Command::TrainBaseline(c) => {
            let cfg = load_config(&c)?;
            let data = splits(&c, &cfg)?;
            let (model, log) = train_baseline(&cfg.model, &cfg.baseline, &data.train, cfg.seed)?;
            let path = checkpoint_path(&c.out, "baseline");
            save_checkpoint(&model, &meta(Phase::Baseline, &model, &cfg, log), &path)?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain { common: c, init } => {
            let cfg = load_config(&c)?;
            let data = splits(&c, &cfg)?;
            let mut model = Model::new(cfg.model.clone(), cfg.seed, candle_core::DType::F32)?;
            if let Some(p) = init {
                let (parent, _) = load_checkpoint(&p)?;
                model.load_shared(&parent.to_table(serde_json::Value::Null)?)?;
            }
            let log = pretrain(&mut model, &cfg.pretrain, &data.train, cfg.seed)?;
            let path = checkpoint_path(&c.out, "pretrain");
            save_checkpoint(&model, &meta(Phase::Pretrain, &model, &cfg, log), &path)?;
            println!("wrote {}", path.display());
        }
        Command::Finetune { common: c, init, mode } => {
            let cfg = load_config(&c)?;
            let data = splits(&c, &cfg)?;
            let (mut model, _) = load_checkpoint(&init)?;
            let log = finetune(&mut model, &cfg.finetune, &data.train, cfg.seed, mode.into())?;
            let path = checkpoint_path(&c.out, "finetune");
            save_checkpoint(&model, &meta(Phase::Finetune, &model, &cfg, log), &path)?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            common: c,
            checkpoint,
            views,
            k,
            mode,
        } => {
            let cfg = load_config(&c)?;
            let data = splits(&c, &cfg)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let patterns = if views.is_empty() {
                enumerate_patterns(k)?
            } else {
                if views.iter().any(|&v| v >= mbev::world::NUM_VIEWS) {
                    bail!("view indices must be below {}", mbev::world::NUM_VIEWS);
                }
                vec![MaskPattern::from_views(&views)]
            };
            let set = EvalSet::encode(&model, &data.eval, cfg.grid.eval_batch)?;
            let label = patterns.iter().map(|p| p.label()).collect::<Vec<_>>().join(" ");
            let report = eval_condition(&model, &set, &label, &patterns, mode.into())?;
            let m = &report.mean;
            println!("mAP {:.4}  NDS {:.4}  mATE {:.3}  mASE {:.3}  mAOE {:.3}", m.map, m.nds, m.mate, m.mase, m.maoe);
            write_json(&c.out.join("eval.json"), &report)?;
            let preds = predict(&model, &set, &patterns[0], mode.into())?;
            let ids: Vec<u64> = data.eval.scenes.iter().map(|s| s.scene_id).collect();
            export_predictions(fs::File::create(c.out.join("predictions.jsonl"))?, &ids, &preds)?;
        }
        Command::Grid(c) => {
            let cfg = load_config(&c)?;
            let data = splits(&c, &cfg)?;
            let report = run_grid(&cfg, &data, &c.out)?;
            write_report(&report, &c.out)?;
            print!("{}", mbev::pipeline::grid::render_text(&report));
        }
        Command::Flops(c) => {
            let cfg = load_config(&c)?;
            let mut rows = Vec::new();
            for variant in [MvrVariant::Local, MvrVariant::Global] {
                let mut m = cfg.model.clone();
                m.mvr.variant = variant;
                for k in 0..=mbev::masking::MAX_MASKED {
                    let p = enumerate_patterns(k)?[0];
                    let f = flop_count(&m, &p);
                    println!(
                        "{variant:?} k={k}: encoder {} mvr {} detector {} total {} (mvr {:.1}%)",
                        f.encoder,
                        f.mvr,
                        f.detector,
                        f.total(),
                        100.0 * f.mvr_fraction()
                    );
                    rows.push(serde_json::json!({"variant": variant, "k": k, "flops": f}));
                }
            }
            write_json(&c.out.join("flops.json"), &rows)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
