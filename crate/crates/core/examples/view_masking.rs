//! Random view masking: training schedules, evaluation pattern sets and the
//! column split used when a failed view is assembled from its neighbours.

use mbev::masking::{enumerate_patterns, Granularity, MaskSampler, MaskSchedule, MAX_MASKED};
use mbev::mvr::partition_columns;

fn main() -> anyhow::Result<()> {
    let schedules = [
        ("never", MaskSchedule::never()),
        ("uniform k in 1..=5", MaskSchedule::uniform_nonzero()),
        ("20% intact, per epoch", MaskSchedule::with_zero(0.2, Granularity::PerEpoch)?),
    ];
    for (name, schedule) in schedules {
        let mut sampler = MaskSampler::new(schedule, 3);
        let drawn: Vec<String> = (0..4)
            .map(|epoch| {
                let pats: Vec<String> = (0..3).map(|_| sampler.sample_mask(epoch).label()).collect();
                format!("e{epoch}[{}]", pats.join(" "))
            })
            .collect();
        println!("{name:<24} {}", drawn.join(" "));
    }

    for k in 0..=MAX_MASKED {
        let pats = enumerate_patterns(k)?;
        let first: Vec<String> = pats.iter().take(4).map(|p| p.label()).collect();
        println!("k={k}: {} patterns, first {}", pats.len(), first.join(" "));
    }

    println!("columns (left, middle, right) of an 8- and 16-wide view:");
    for rho in [0.60, 0.65, 0.70, 0.75, 0.76, 0.80] {
        println!("  rho {rho:.2}: {:?} {:?}", partition_columns(8, rho)?, partition_columns(16, rho)?);
    }
    Ok(())
}
