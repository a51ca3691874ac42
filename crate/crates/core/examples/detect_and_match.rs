//! Runs the detection head on encoded features, matches its queries to the
//! ground truth and evaluates the detection loss.

use candle_core::DType;
use mbev::detection::{det_loss, hungarian_match, GtBox};
use mbev::model::{Model, ModelConfig};
use mbev::world::{generate_dataset, SceneConfig};

fn main() -> anyhow::Result<()> {
    let model = Model::new(ModelConfig::default(), 0, DType::F32)?;
    let scenes = SceneConfig {
        n_scenes: 2,
        ..SceneConfig::default()
    };
    let ds = generate_dataset(&scenes, &model.rig)?;
    let frames: Vec<_> = ds.frames.iter().collect();
    let out = model.detect(&model.encode(&frames)?)?;
    println!("logits {:?}, boxes {:?}", out.logits.dims(), out.reg.dims());

    let gts: Vec<Vec<GtBox>> = ds.scenes.iter().map(|s| s.objects.iter().map(GtBox::from).collect()).collect();
    let (probs, reg) = out.to_host()?;
    let lc = &model.cfg.detector.loss;
    for (s, g) in gts.iter().enumerate() {
        let assign = hungarian_match(&probs[s], &reg[s], g, lc.match_cls, lc.match_box);
        println!("scene {s}: {} objects, matched (query, gt) {:?}", g.len(), assign);
    }
    let loss = det_loss(&out, &gts, lc)?;
    println!(
        "loss {:.4} = {} x focal {:.4} + {} x L1 {:.4}",
        loss.total.to_scalar::<f32>()?,
        lc.w_cls,
        loss.focal,
        lc.w_box,
        loss.l1
    );
    let top = out.decode()?[0]
        .iter()
        .copied()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .expect("queries");
    println!("most confident query of scene 0: {top:?}");
    Ok(())
}
