//! Prints the fixed sine-cosine grid embedding and where a few frustum cells
//! land in the ego frame.

use mbev::positional::{frustum_points, sincos_2d_values, FrustumConfig};
use mbev::world::{make_rig, VIEW_NAMES};

fn main() -> anyhow::Result<()> {
    let (hf, wf, c) = (4, 8, 16);
    let pe = sincos_2d_values(hf, wf, c)?;
    for (r, col) in [(0, 0), (0, 1), (3, 7)] {
        let cell = &pe[(r * wf + col) * c..(r * wf + col + 1) * c];
        let shown: Vec<String> = cell.iter().take(6).map(|v| format!("{v:+.3}")).collect();
        println!("pe[{r},{col}] = [{} ...]", shown.join(", "));
    }

    let rig = make_rig(6, 70.0, 60.0, 1.5, (64, 128))?;
    let depths = FrustumConfig::default().depths;
    println!("depths {:?}", depths.iter().map(|d| (d * 10.0).round() / 10.0).collect::<Vec<_>>());
    for (v, cam) in rig.cameras.iter().enumerate() {
        let pts = frustum_points(cam, hf, wf, &depths);
        // Centre column of the middle row, nearest and farthest sample.
        let cell = (hf / 2) * wf + wf / 2;
        let near = pts[cell * depths.len()];
        let far = pts[cell * depths.len() + depths.len() - 1];
        println!(
            "{:<12} near ({:+6.1}, {:+6.1}, {:+5.2})  far ({:+6.1}, {:+6.1}, {:+5.2})",
            VIEW_NAMES[v], near[0], near[1], near[2], far[0], far[1], far[2]
        );
    }
    Ok(())
}
