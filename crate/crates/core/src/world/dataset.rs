//! Multi-view frames and the `MBEV-DS1` dataset file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "MBEV-DS1"
//! header   6 x u32  version, n_scenes, V, T, H, W
//! images   n_scenes * V * T * H * W * 3 x f32
//! manifest u64 byte length, then UTF-8 JSON array of scene records
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::camera::{Rig, NUM_VIEWS};
use super::render::render_frame;
use super::scene::{sample_scene, Scene, SceneConfig};
use crate::error::{MbevError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MBEV-DS1";
pub const DATASET_VERSION: u32 = 1;
pub const NUM_TIMESTEPS: usize = 2;

/// Rendered images of one sample, `(V, T, H, W, 3)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl MultiViewFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = NUM_VIEWS * NUM_TIMESTEPS * height * width * 3;
        if data.len() != expected {
            return Err(MbevError::ShapeMismatch(format!(
                "frame has {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MbevError::ShapeMismatch("frame contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    /// The `(H, W, 3)` image of view `v` at timestep `t`.
    pub fn image(&self, v: usize, t: usize) -> &[f32] {
        let n = self.image_len();
        let start = (v * NUM_TIMESTEPS + t) * n;
        &self.data[start..start + n]
    }

    pub fn image_mut(&mut self, v: usize, t: usize) -> &mut [f32] {
        let n = self.image_len();
        let start = (v * NUM_TIMESTEPS + t) * n;
        &mut self.data[start..start + n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub frames: Vec<MultiViewFrame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height, f.width))
    }
}

/// Per-scene generator: the base seed selects the stream family, the scene
/// index selects the stream, so scenes can be generated in any order.
pub fn scene_rng(seed: u64, scene_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id);
    rng
}

pub fn generate_dataset(cfg: &SceneConfig, rig: &Rig) -> Result<Dataset> {
    let (height, width) = rig.image_size();
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut frames = Vec::with_capacity(cfg.n_scenes);
    for id in 0..cfg.n_scenes as u64 {
        let scene = sample_scene(&mut scene_rng(cfg.seed, id), cfg, rig, id)?;
        frames.push(MultiViewFrame::new(height, width, render_frame(&scene, rig))?);
        scenes.push(scene);
    }
    Ok(Dataset { scenes, frames })
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let (height, width) = match ds.image_size() {
        Some(s) if !ds.scenes.is_empty() && ds.scenes.len() == ds.frames.len() => s,
        _ => {
            return Err(MbevError::ShapeMismatch(
                "dataset must hold one frame per scene and at least one scene".into(),
            ))
        }
    };
    w.write_all(DATASET_MAGIC)?;
    let header = [
        DATASET_VERSION,
        ds.scenes.len() as u32,
        NUM_VIEWS as u32,
        NUM_TIMESTEPS as u32,
        height as u32,
        width as u32,
    ];
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for frame in &ds.frames {
        if frame.height != height || frame.width != width {
            return Err(MbevError::ShapeMismatch("frames differ in size".into()));
        }
        let mut buf = Vec::with_capacity(frame.data.len() * 4);
        for v in &frame.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let manifest = serde_json::to_vec(&ds.scenes)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset_to(ds, BufWriter::new(File::create(path)?))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => MbevError::TruncatedFile(what),
        _ => MbevError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset_from<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(MbevError::BadMagic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut r, "header")?;
    if version != DATASET_VERSION {
        return Err(MbevError::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n_scenes = read_u32(&mut r, "header")? as usize;
    let views = read_u32(&mut r, "header")? as usize;
    let steps = read_u32(&mut r, "header")? as usize;
    let height = read_u32(&mut r, "header")? as usize;
    let width = read_u32(&mut r, "header")? as usize;
    if views != NUM_VIEWS || steps != NUM_TIMESTEPS {
        return Err(MbevError::ShapeMismatch(format!(
            "dataset has V={views}, T={steps}; expected {NUM_VIEWS}, {NUM_TIMESTEPS}"
        )));
    }
    let per_frame = views * steps * height * width * 3;
    let mut frames = Vec::with_capacity(n_scenes);
    let mut buf = vec![0u8; per_frame * 4];
    for _ in 0..n_scenes {
        read_exact_or(&mut r, &mut buf, "image tensor")?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        frames.push(MultiViewFrame::new(height, width, data)?);
    }
    let mut len = [0u8; 8];
    read_exact_or(&mut r, &mut len, "manifest length")?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    read_exact_or(&mut r, &mut manifest, "manifest")?;
    let scenes: Vec<Scene> = serde_json::from_slice(&manifest)?;
    if scenes.len() != n_scenes {
        return Err(MbevError::ShapeMismatch(format!(
            "manifest lists {} scenes, header says {n_scenes}",
            scenes.len()
        )));
    }
    Ok(Dataset { scenes, frames })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
