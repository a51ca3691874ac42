//! Encodes one rendered frame into per-view feature grids.

use mbev::model::{Model, ModelConfig};
use mbev::world::{generate_dataset, SceneConfig};

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 0, candle_core::DType::F32)?;
    let scenes = SceneConfig {
        n_scenes: 2,
        ..SceneConfig::default()
    };
    let ds = generate_dataset(&scenes, &model.rig)?;
    let frames: Vec<_> = ds.frames.iter().collect();

    let t = std::time::Instant::now();
    let features = model.encode(&frames)?;
    println!("features {:?} in {:.2?}", features.dims(), t.elapsed());
    println!("grid {:?}, {} parameters in total", cfg.grid(), model.store.n_params());
    let enc: usize = model.store.select(&["encoder."]).iter().map(|(_, v)| v.elem_count()).sum();
    println!("encoder parameters {enc}");

    let per_view = features.get(0)?.sqr()?.mean_keepdim(4)?.mean_keepdim(3)?.mean_keepdim(2)?.flatten_all()?;
    println!("mean squared activation per (view, t): {:?}", per_view.to_vec1::<f32>()?);
    Ok(())
}
