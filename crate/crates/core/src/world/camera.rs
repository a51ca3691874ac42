//! Pinhole cameras and the six-view ring rig.
//!
//! Frames: the ego frame is x forward, y left, z up. Camera frames follow
//! the usual image convention: x right, y down, z along the optical axis.

use nalgebra::{Matrix3, Vector3};

use crate::error::{MbevError, Result};

pub const NUM_VIEWS: usize = 6;

/// Names in yaw order: view `i` looks along `i * 60°` with the default rig.
pub const VIEW_NAMES: [&str; NUM_VIEWS] = [
    "Front",
    "Front_Left",
    "Back_Left",
    "Back",
    "Back_Right",
    "Front_Right",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Ego to camera rotation.
    pub rotation: Matrix3<f64>,
    /// Ego to camera translation: `p_cam = rotation * p_ego + translation`.
    pub translation: Vector3<f64>,
}

impl CameraSpec {
    /// Camera at `position` (ego frame) looking horizontally along `yaw`.
    pub fn looking_at_yaw(
        yaw: f64,
        position: Vector3<f64>,
        hfov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let cam = Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: -(rotation * position),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(MbevError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64) {
            return Err(MbevError::InvalidCamera("cx outside image".into()));
        }
        if !(0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(MbevError::InvalidCamera("cy outside image".into()));
        }
        let r = &self.rotation;
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(MbevError::InvalidCamera("rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Horizontal direction of the optical axis in the ego frame.
    pub fn yaw(&self) -> f64 {
        let axis = self.rotation.row(2);
        axis[1].atan2(axis[0])
    }

    pub fn to_camera(&self, p_ego: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_ego + self.translation
    }

    pub fn to_ego(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Pixel of a camera-frame point, ignoring image bounds. `None` when the
    /// point is not in front of the camera.
    pub fn project_cam(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Ego-frame point at optical-axis `depth` along the ray through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let p_cam = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.to_ego(&p_cam)
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width as f64).contains(&u) && (0.0..=self.height as f64).contains(&v)
    }
}

/// Pixel coordinates and camera depth of `p_ego`, if it lands inside the image.
///
/// The image is the closed rectangle `[0, width] x [0, height]`, so points on
/// the frustum boundary still project.
pub fn project_point(cam: &CameraSpec, p_ego: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let p_cam = cam.to_camera(p_ego);
    let (u, v) = cam.project_cam(&p_cam)?;
    cam.in_image(u, v).then_some((u, v, p_cam.z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub cameras: Vec<CameraSpec>,
    pub yaw_spacing_deg: f64,
    pub hfov_deg: f64,
    /// `neighbors[i] = (left, right)` on the ring.
    pub neighbors: Vec<(usize, usize)>,
}

impl Rig {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    /// The view whose yaw is one spacing counter-clockwise, i.e. to the left.
    pub fn left(&self, i: usize) -> usize {
        self.neighbors[i].0
    }

    pub fn right(&self, i: usize) -> usize {
        self.neighbors[i].1
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].height, self.cameras[0].width)
    }

    /// Angular overlap between adjacent views, in degrees.
    pub fn adjacent_overlap_deg(&self) -> f64 {
        self.hfov_deg - self.yaw_spacing_deg
    }
}

/// Builds the ring rig: all cameras share one position `(0, 0, cam_height_m)`
/// and view `i` looks along yaw `i * yaw_spacing_deg`.
pub fn make_rig(
    n_views: usize,
    hfov_deg: f64,
    yaw_spacing_deg: f64,
    cam_height_m: f64,
    image_size: (usize, usize),
) -> Result<Rig> {
    if n_views != NUM_VIEWS {
        return Err(MbevError::InvalidRig(format!(
            "expected {NUM_VIEWS} views, got {n_views}"
        )));
    }
    if hfov_deg <= yaw_spacing_deg {
        return Err(MbevError::NoOverlap {
            hfov_deg,
            spacing_deg: yaw_spacing_deg,
        });
    }
    if hfov_deg >= 180.0 {
        return Err(MbevError::InvalidRig("hfov must be below 180°".into()));
    }
    let (height, width) = image_size;
    let position = Vector3::new(0.0, 0.0, cam_height_m);
    let cameras = (0..n_views)
        .map(|i| {
            let yaw = (i as f64 * yaw_spacing_deg).to_radians();
            CameraSpec::looking_at_yaw(yaw, position, hfov_deg, width, height)
        })
        .collect::<Result<Vec<_>>>()?;
    let neighbors = (0..n_views)
        .map(|i| ((i + 1) % n_views, (i + n_views - 1) % n_views))
        .collect();
    Ok(Rig {
        cameras,
        yaw_spacing_deg,
        hfov_deg,
        neighbors,
    })
}

fn wrap_deg(a: f64) -> f64 {
    let mut a = a % 360.0;
    if a > 180.0 {
        a -= 360.0;
    } else if a <= -180.0 {
        a += 360.0;
    }
    a
}

/// Fraction of view `i`'s horizontal field of view that view `j` also sees.
pub fn overlap_fraction(rig: &Rig, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(MbevError::SameView(i));
    }
    let d = wrap_deg(rig.cameras[j].yaw().to_degrees() - rig.cameras[i].yaw().to_degrees());
    Ok(((rig.hfov_deg - d.abs()) / rig.hfov_deg).clamp(0.0, 1.0))
}
