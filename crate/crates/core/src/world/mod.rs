//! Procedural six-camera driving world: rig geometry, scenes, rendering and
//! dataset persistence.

pub mod camera;
pub mod dataset;
pub mod render;
pub mod scene;

pub use camera::{make_rig, overlap_fraction, project_point, CameraSpec, Rig, NUM_VIEWS, VIEW_NAMES};
pub use dataset::{
    generate_dataset, read_dataset, scene_rng, write_dataset, Dataset, MultiViewFrame, NUM_TIMESTEPS,
};
pub use render::{render_frame, render_view, Image};
pub use scene::{sample_scene, EgoMotion, Object3D, Scene, SceneConfig};
