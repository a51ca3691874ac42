//! Analytic multiply-accumulate counts of one inference, split into encoder,
//! reconstruction and detector, for both reconstruction variants.

use mbev::masking::{MaskPattern, MAX_MASKED};
use mbev::metrics::flops::flop_count;
use mbev::model::ModelConfig;
use mbev::mvr::MvrVariant;

fn main() {
    let base = ModelConfig::default();
    println!("grid {:?}, channels {}", base.grid(), base.encoder.channels);
    println!("{:<7} {:>2} {:>14} {:>14} {:>14} {:>8}", "variant", "k", "encoder", "mvr", "detector", "mvr %");
    for variant in [MvrVariant::Local, MvrVariant::Global] {
        let mut cfg = base.clone();
        cfg.mvr.variant = variant;
        for k in 0..=MAX_MASKED {
            let views: Vec<usize> = (0..k).collect();
            let f = flop_count(&cfg, &MaskPattern::from_views(&views));
            println!(
                "{:<7} {k:>2} {:>14} {:>14} {:>14} {:>7.1}%",
                format!("{variant:?}"),
                f.encoder,
                f.mvr,
                f.detector,
                100.0 * f.mvr_fraction()
            );
        }
    }
}
