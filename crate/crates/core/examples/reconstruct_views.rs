//! Reconstructs failed views with the local and global variants of an
//! untrained module and compares the error with plain mask-token filling.

use candle_core::DType;
use mbev::backbone::FeatureGrid;
use mbev::masking::MaskPattern;
use mbev::model::{Model, ModelConfig};
use mbev::mvr::{fill_mse, MvrVariant};
use mbev::world::{generate_dataset, SceneConfig};

fn main() -> anyhow::Result<()> {
    let pattern = MaskPattern::from_views(&[0, 3]);
    for variant in [MvrVariant::Local, MvrVariant::Global] {
        let mut cfg = ModelConfig::default();
        cfg.mvr.variant = variant;
        let model = Model::new(cfg, 0, DType::F32)?;
        let scenes = SceneConfig {
            n_scenes: 1,
            ..SceneConfig::default()
        };
        let ds = generate_dataset(&scenes, &model.rig)?;
        let features = model.encode(&[&ds.frames[0]])?;

        let grid = FeatureGrid::new(features.get(0)?)?;
        let seq = match variant {
            MvrVariant::Local => model.mvr.assemble_local(&grid, &pattern, 3)?,
            MvrVariant::Global => model.mvr.assemble_global(&grid, &pattern)?,
        };
        println!(
            "{variant:?}: sequence of {} tokens, {} of them in failed views, first {:?}",
            seq.provenance.len(),
            seq.masked.len(),
            seq.provenance[0]
        );

        let t = std::time::Instant::now();
        let recon = model.mvr.reconstruct_batch(&features, &[pattern])?.expect("two views failed");
        let loss = recon.loss()?.to_scalar::<f32>()?;
        let fill = fill_mse(&recon.target, model.mvr.mask_token.as_tensor())?;
        println!(
            "  reconstructed {:?} in {:.2?}: mse {loss:.4} (mask-token fill {fill:.4})",
            recon.pairs,
            t.elapsed()
        );
    }
    Ok(())
}
