//! Flat-shaded box rasterizer.
//!
//! Every box face is a convex quad painted in its class color times a fixed
//! per-face tint; faces are back-face culled and drawn far to near.

use nalgebra::Vector3;

use super::camera::{CameraSpec, Rig};
use super::scene::{Object3D, Scene};

const NEAR: f64 = 0.05;

pub const CLASS_COLORS: [[f32; 3]; 4] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.35, 0.95],
    [0.95, 0.85, 0.10],
    [0.15, 0.85, 0.30],
];

/// Corner indices (see [`Object3D::corners`]) and tint for each face.
const FACES: [([usize; 4], f32); 6] = [
    ([0, 1, 5, 4], 1.00), // front
    ([2, 3, 7, 6], 0.55), // back
    ([3, 0, 4, 7], 0.80), // left
    ([1, 2, 6, 5], 0.70), // right
    ([4, 5, 6, 7], 0.90), // top
    ([0, 3, 2, 1], 0.45), // bottom
];

pub fn class_color(class_id: usize) -> [f32; 3] {
    let base = CLASS_COLORS[class_id % CLASS_COLORS.len()];
    // Classes past the palette get a darker variant so they stay distinct.
    let dim = 1.0 / (1 + class_id / CLASS_COLORS.len()) as f32;
    base.map(|c| c * dim)
}

/// Every color a face of `class_id` can be painted with.
pub fn class_face_colors(class_id: usize) -> Vec<[f32; 3]> {
    let base = class_color(class_id);
    FACES.iter().map(|&(_, tint)| base.map(|c| c * tint)).collect()
}

/// Background color of pixel row `row`: a sky gradient above the horizon and
/// a ground gradient that brightens towards the camera below it.
pub fn background(cam: &CameraSpec, row: usize) -> [f32; 3] {
    let v = row as f64 + 0.5;
    if v < cam.cy {
        let s = (v / cam.cy) as f32;
        [0.55 + 0.1 * s, 0.62 + 0.1 * s, 0.70 + 0.08 * s]
    } else {
        let g = ((v - cam.cy) / (cam.height as f64 - cam.cy)) as f32;
        [0.20 + 0.25 * g, 0.20 + 0.22 * g, 0.18 + 0.2 * g]
    }
}

/// Image buffer `(height, width, 3)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }
}

pub fn background_image(cam: &CameraSpec) -> Image {
    let mut img = Image {
        height: cam.height,
        width: cam.width,
        data: vec![0.0; cam.height * cam.width * 3],
    };
    for row in 0..cam.height {
        let c = background(cam, row);
        for col in 0..cam.width {
            img.set(row, col, c);
        }
    }
    img
}

/// Sutherland–Hodgman clip of a camera-frame polygon against `z >= NEAR`.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        let a_in = a.z >= NEAR;
        let b_in = b.z >= NEAR;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

struct ProjectedFace {
    depth: f64,
    pts: Vec<(f64, f64)>,
    color: [f32; 3],
}

fn fill_convex(img: &mut Image, pts: &[(f64, f64)], color: [f32; 3]) {
    if pts.len() < 3 {
        return;
    }
    let area: f64 = (0..pts.len())
        .map(|k| {
            let (x0, y0) = pts[k];
            let (x1, y1) = pts[(k + 1) % pts.len()];
            x0 * y1 - x1 * y0
        })
        .sum();
    if area.abs() < 1e-12 {
        return;
    }
    let sign = area.signum();
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let c0 = (min_x - 0.5).floor().max(0.0) as usize;
    let c1 = ((max_x - 0.5).ceil().max(-1.0) + 1.0).min(img.width as f64) as usize;
    let r0 = (min_y - 0.5).floor().max(0.0) as usize;
    let r1 = ((max_y - 0.5).ceil().max(-1.0) + 1.0).min(img.height as f64) as usize;
    for row in r0..r1 {
        let py = row as f64 + 0.5;
        for col in c0..c1 {
            let px = col as f64 + 0.5;
            let inside = (0..pts.len()).all(|k| {
                let (x0, y0) = pts[k];
                let (x1, y1) = pts[(k + 1) % pts.len()];
                sign * ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) >= 0.0
            });
            if inside {
                img.set(row, col, color);
            }
        }
    }
}

fn project_faces(objects: &[Object3D], cam: &CameraSpec) -> Vec<ProjectedFace> {
    let eye = cam.center();
    let mut faces = Vec::new();
    for obj in objects {
        let corners = obj.corners();
        let box_center = Vector3::from(obj.center);
        let base = class_color(obj.class_id);
        for &(idx, tint) in &FACES {
            let face_center = idx.iter().map(|&i| corners[i]).sum::<Vector3<f64>>() / 4.0;
            let normal = face_center - box_center;
            if (eye - face_center).dot(&normal) <= 0.0 {
                continue;
            }
            let cam_pts: Vec<_> = idx.iter().map(|&i| cam.to_camera(&corners[i])).collect();
            let clipped = clip_near(&cam_pts);
            if clipped.len() < 3 {
                continue;
            }
            let depth = clipped.iter().map(|p| p.z).sum::<f64>() / clipped.len() as f64;
            let pts = clipped
                .iter()
                .filter_map(|p| cam.project_cam(p))
                .collect::<Vec<_>>();
            faces.push(ProjectedFace {
                depth,
                pts,
                color: base.map(|c| c * tint),
            });
        }
    }
    faces.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    faces
}

/// Renders `objects` (already expressed in the ego frame of the frame being
/// drawn) through `cam`.
pub fn render_objects(objects: &[Object3D], cam: &CameraSpec) -> Image {
    let mut img = background_image(cam);
    for face in project_faces(objects, cam) {
        fill_convex(&mut img, &face.pts, face.color);
    }
    img
}

/// Renders view `cam` of `scene` at timestep `t` (0 = t−1, 1 = t).
pub fn render_view(scene: &Scene, cam: &CameraSpec, t: usize) -> Image {
    render_objects(&scene.objects_at(t), cam)
}

/// All views at both timesteps, flattened as `(V, T, H, W, 3)`.
pub fn render_frame(scene: &Scene, rig: &Rig) -> Vec<f32> {
    let mut out = Vec::new();
    let per_t: Vec<Vec<Object3D>> = (0..2).map(|t| scene.objects_at(t)).collect();
    for cam in &rig.cameras {
        for objects in &per_t {
            out.extend(render_objects(objects, cam).data);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::camera::{make_rig, project_point};
    use crate::world::scene::EgoMotion;

    fn rig() -> Rig {
        make_rig(6, 70.0, 60.0, 1.5, (64, 128)).unwrap()
    }

    fn scene_with(objects: Vec<Object3D>) -> Scene {
        Scene {
            objects,
            ego_motion: EgoMotion::default(),
            scene_id: 0,
        }
    }

    fn car_at(x: f64, y: f64) -> Object3D {
        Object3D {
            center: [x, y, 0.8],
            size: [4.5, 1.9, 1.6],
            yaw: 0.4,
            velocity: [0.0, 0.0],
            class_id: 0,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let rig = rig();
        let s = scene_with(vec![]);
        for cam in &rig.cameras {
            assert_eq!(render_view(&s, cam, 1), background_image(cam));
        }
    }

    #[test]
    fn front_only_object_leaves_back_untouched() {
        let rig = rig();
        let s = scene_with(vec![car_at(15.0, 0.0)]);
        assert_ne!(render_view(&s, &rig.cameras[0], 1), background_image(&rig.cameras[0]));
        assert_eq!(render_view(&s, &rig.cameras[3], 1), background_image(&rig.cameras[3]));
    }

    #[test]
    fn straddling_object_appears_in_both_views() {
        let rig = rig();
        // Place the car on the bisector between Front (0°) and Front_Right (300°).
        let a = (-30f64).to_radians();
        let car = car_at(15.0 * a.cos(), 15.0 * a.sin());
        for view in [0, 5] {
            let cam = &rig.cameras[view];
            assert!(car.corners().iter().any(|c| project_point(cam, c).is_some()));
        }
        let s = scene_with(vec![car]);
        let colors = class_face_colors(0);
        for view in [0, 5] {
            let img = render_view(&s, &rig.cameras[view], 1);
            let hits = img
                .data
                .chunks(3)
                .filter(|px| colors.iter().any(|c| c.as_slice() == *px))
                .count();
            assert!(hits >= 1, "view {view} has no class pixels");
        }
    }

    #[test]
    fn rendering_is_deterministic_and_static_scenes_repeat() {
        let rig = rig();
        let s = scene_with(vec![car_at(12.0, 4.0), car_at(-8.0, -6.0)]);
        for cam in &rig.cameras {
            let a = render_view(&s, cam, 1);
            assert_eq!(a, render_view(&s, cam, 1));
            assert_eq!(a, render_view(&s, cam, 0));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn nearer_object_occludes_farther() {
        let rig = rig();
        let mut far = car_at(25.0, 0.0);
        far.class_id = 1;
        let near = car_at(10.0, 0.0);
        let img = render_view(&scene_with(vec![far, near]), &rig.cameras[0], 1);
        let cam = &rig.cameras[0];
        let (u, v, _) = project_point(cam, &Vector3::new(10.0, 0.0, 0.8)).unwrap();
        let px = img.pixel(v as usize, u as usize);
        assert!(class_face_colors(0).iter().any(|c| *c == px));
    }

    #[test]
    fn object_behind_camera_plane_is_clipped() {
        let rig = rig();
        // Long truck passing right next to the camera: partially behind the image plane.
        let obj = Object3D {
            center: [0.0, 3.0, 1.5],
            size: [12.0, 2.5, 3.0],
            yaw: 0.0,
            velocity: [0.0, 0.0],
            class_id: 1,
        };
        let img = render_view(&scene_with(vec![obj]), &rig.cameras[1], 1);
        assert!(img.data.iter().all(|v| v.is_finite()));
        assert_ne!(img, background_image(&rig.cameras[1]));
    }
}
