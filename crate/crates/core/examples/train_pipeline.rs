//! The three training phases end to end on a tiny configuration, followed by
//! an evaluation with one failed camera. Takes a minute or two on one core;
//! the numbers only show that everything is wired up.

use mbev::masking::enumerate_patterns;
use mbev::metrics::eval::{eval_condition, EvalSet};
use mbev::model::Completion;
use mbev::pipeline::{finetune, generate_splits, pretrain, train_baseline, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 96;
    cfg.data.n_eval = 32;
    cfg.model.encoder.patch = 16;
    cfg.model.encoder.channels = 32;
    cfg.model.encoder.depth = 2;
    cfg.model.mvr.decoder_dim = 64;
    for phase in [&mut cfg.baseline, &mut cfg.pretrain, &mut cfg.finetune] {
        phase.epochs = 2;
        phase.warmup_steps = 5;
    }
    cfg.validate()?;

    let splits = generate_splits(&cfg.data, &cfg.model)?;
    let (baseline, _) = train_baseline(&cfg.model, &cfg.baseline, &splits.train, cfg.seed)?;
    let mut model = baseline.duplicate()?;
    let pre = pretrain(&mut model, &cfg.pretrain, &splits.train, cfg.seed)?;
    println!("reconstruction loss per epoch {:?}", pre.objective());
    finetune(&mut model, &cfg.finetune, &splits.train, cfg.seed, Completion::Reconstruct)?;

    let single = enumerate_patterns(1)?;
    for (name, m, mode) in [
        ("baseline + mask token", &baseline, Completion::MaskToken),
        ("reconstruction", &model, Completion::Reconstruct),
    ] {
        let set = EvalSet::encode(m, &splits.eval, cfg.grid.eval_batch)?;
        let r = eval_condition(m, &set, "one view failed", &single, mode)?;
        println!("{name:<22} mAP {:.4}  NDS_like {:.4}", r.mean.map, r.mean.nds);
    }
    Ok(())
}
