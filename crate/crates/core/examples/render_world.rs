//! Samples a scene, renders all six cameras at both timesteps and writes a
//! contact sheet as a binary PPM (views as columns, timesteps as rows).
//!
//!     cargo run --example render_world -- [seed] [out.ppm]

use std::io::Write;

use mbev::world::{
    make_rig, overlap_fraction, render_frame, sample_scene, scene_rng, SceneConfig, NUM_TIMESTEPS, NUM_VIEWS,
    VIEW_NAMES,
};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let out = args.next().unwrap_or_else(|| "world.ppm".into());

    let rig = make_rig(6, 70.0, 60.0, 1.5, (64, 128))?;
    println!("adjacent overlap {:.1} deg, fraction {:.3}", rig.adjacent_overlap_deg(), overlap_fraction(&rig, 0, 1)?);

    let cfg = SceneConfig::default();
    let scene = sample_scene(&mut scene_rng(seed, 0), &cfg, &rig, 0)?;
    for o in &scene.objects {
        println!(
            "class {} at ({:6.1}, {:6.1}) size {:.1}x{:.1}x{:.1} yaw {:+.2} v ({:+.1}, {:+.1})",
            o.class_id, o.center[0], o.center[1], o.size[0], o.size[1], o.size[2], o.yaw, o.velocity[0], o.velocity[1]
        );
    }

    let (h, w) = rig.image_size();
    let frame = render_frame(&scene, &rig);
    let (sheet_w, sheet_h) = (w * NUM_VIEWS, h * NUM_TIMESTEPS);
    let mut px = vec![0u8; sheet_w * sheet_h * 3];
    for v in 0..NUM_VIEWS {
        for t in 0..NUM_TIMESTEPS {
            let base = (v * NUM_TIMESTEPS + t) * h * w * 3;
            for r in 0..h {
                for c in 0..w {
                    let src = base + (r * w + c) * 3;
                    let dst = ((t * h + r) * sheet_w + v * w + c) * 3;
                    for k in 0..3 {
                        px[dst + k] = (frame[src + k].clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
    write!(f, "P6\n{sheet_w} {sheet_h}\n255\n")?;
    f.write_all(&px)?;
    println!("columns: {}", VIEW_NAMES.join(", "));
    println!("wrote {out}");
    Ok(())
}
