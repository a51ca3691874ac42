use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{project_point, Rig};
use crate::error::{MbevError, Result};

/// Time between the two keyframes of a sample, seconds.
pub const FRAME_DT: f64 = 0.5;

/// Nominal `(l, w, h)` per class; classes beyond the table reuse it cyclically.
pub const CLASS_SIZES: [[f64; 3]; 4] = [
    [4.5, 1.9, 1.6], // car
    [7.0, 2.5, 3.0], // truck
    [0.8, 0.8, 1.8], // pedestrian
    [1.8, 0.8, 1.6], // cyclist
];

pub fn class_size(class_id: usize) -> [f64; 3] {
    CLASS_SIZES[class_id % CLASS_SIZES.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object3D {
    /// Box center in the ego frame at time t, meters.
    pub center: [f64; 3],
    /// `(l, w, h)`, meters.
    pub size: [f64; 3],
    /// Heading in (−π, π].
    pub yaw: f64,
    /// Ground-plane velocity in the ego frame at t, m/s.
    pub velocity: [f64; 2],
    pub class_id: usize,
}

/// Pose of the ego at t expressed in the ego frame at t−1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EgoMotion {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl EgoMotion {
    /// Maps a point from the ego frame at t into the ego frame at t−1.
    pub fn to_previous(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.dyaw.sin_cos();
        [c * p[0] - s * p[1] + self.dx, s * p[0] + c * p[1] + self.dy]
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl Object3D {
    /// State at t−1 in the ego frame at t−1, by constant-velocity rollback.
    pub fn at_previous(&self, ego: &EgoMotion, dt: f64) -> Object3D {
        let world_prev = [
            self.center[0] - self.velocity[0] * dt,
            self.center[1] - self.velocity[1] * dt,
        ];
        let p = ego.to_previous(world_prev);
        let (s, c) = ego.dyaw.sin_cos();
        let v = self.velocity;
        Object3D {
            center: [p[0], p[1], self.center[2]],
            size: self.size,
            yaw: wrap_angle(self.yaw + ego.dyaw),
            velocity: [c * v[0] - s * v[1], s * v[0] + c * v[1]],
            class_id: self.class_id,
        }
    }

    /// The eight box corners in the ego frame. Order: bottom face
    /// (front-left, front-right, back-right, back-left) then the same on top.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let [l, w, h] = self.size;
        let (s, c) = self.yaw.sin_cos();
        let local = [
            (0.5 * l, 0.5 * w),
            (0.5 * l, -0.5 * w),
            (-0.5 * l, -0.5 * w),
            (-0.5 * l, 0.5 * w),
        ];
        let mut out = [Vector3::zeros(); 8];
        for (k, &(x, y)) in local.iter().enumerate() {
            let gx = self.center[0] + c * x - s * y;
            let gy = self.center[1] + s * x + c * y;
            out[k] = Vector3::new(gx, gy, self.center[2] - 0.5 * h);
            out[k + 4] = Vector3::new(gx, gy, self.center[2] + 0.5 * h);
        }
        out
    }

    fn footprint_radius(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object3D>,
    pub ego_motion: EgoMotion,
    pub scene_id: u64,
}

impl Scene {
    /// Objects as seen at timestep `t` (0 = t−1, 1 = t).
    pub fn objects_at(&self, t: usize) -> Vec<Object3D> {
        match t {
            0 => self
                .objects
                .iter()
                .map(|o| o.at_previous(&self.ego_motion, FRAME_DT))
                .collect(),
            _ => self.objects.clone(),
        }
    }
}

fn default_min_radius() -> f64 {
    4.0
}

fn default_max_attempts() -> usize {
    200
}

/// Scene-generation parameters; also the on-disk scene config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub n_classes: usize,
    pub world_radius_m: f64,
    pub speed_max_mps: f64,
    pub ego_speed_max_mps: f64,
    #[serde(default = "default_min_radius")]
    pub min_radius_m: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_scenes: 2000,
            seed: 0,
            n_objects_min: 1,
            n_objects_max: 6,
            n_classes: 4,
            world_radius_m: 30.0,
            speed_max_mps: 8.0,
            ego_speed_max_mps: 10.0,
            min_radius_m: default_min_radius(),
            max_attempts: default_max_attempts(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects_min > self.n_objects_max {
            return Err(MbevError::InvalidConfig("n_objects_min > n_objects_max".into()));
        }
        if self.n_classes == 0 {
            return Err(MbevError::InvalidConfig("n_classes must be positive".into()));
        }
        if !(self.world_radius_m > self.min_radius_m && self.min_radius_m >= 0.0) {
            return Err(MbevError::InvalidConfig("world radius must exceed min radius".into()));
        }
        Ok(())
    }
}

fn visible_anywhere(rig: &Rig, obj: &Object3D) -> bool {
    let c = Vector3::from(obj.center);
    rig.cameras.iter().any(|cam| project_point(cam, &c).is_some())
}

/// Draws one scene. Objects are rejection-sampled until they neither overlap
/// earlier objects nor fall outside every camera at time t.
pub fn sample_scene<R: Rng>(
    rng: &mut R,
    params: &SceneConfig,
    rig: &Rig,
    scene_id: u64,
) -> Result<Scene> {
    params.validate()?;
    let n = rng.random_range(params.n_objects_min..=params.n_objects_max);
    let mut objects: Vec<Object3D> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n {
        attempts += 1;
        if attempts > params.max_attempts * n.max(1) {
            return Err(MbevError::SamplingExhausted { attempts });
        }
        let class_id = rng.random_range(0..params.n_classes);
        let nominal = class_size(class_id);
        let size = nominal.map(|d| d * rng.random_range(0.9..1.1));
        let r = rng.random_range(params.min_radius_m..=params.world_radius_m);
        let theta = rng.random_range(-PI..PI);
        let yaw = wrap_angle(rng.random_range(-PI..PI));
        let speed = rng.random_range(0.0..=params.speed_max_mps);
        let candidate = Object3D {
            center: [r * theta.cos(), r * theta.sin(), 0.5 * size[2]],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            class_id,
        };
        let clear = objects.iter().all(|o| {
            let d = (o.center[0] - candidate.center[0]).hypot(o.center[1] - candidate.center[1]);
            d > o.footprint_radius() + candidate.footprint_radius() + 0.5
        });
        if clear && visible_anywhere(rig, &candidate) {
            objects.push(candidate);
        }
    }
    let ego_speed = rng.random_range(0.0..=params.ego_speed_max_mps);
    let dyaw = rng.random_range(-0.1..0.1);
    Ok(Scene {
        objects,
        ego_motion: EgoMotion {
            dx: ego_speed * FRAME_DT,
            dy: 0.0,
            dyaw,
        },
        scene_id,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::world::camera::make_rig;

    fn rig() -> Rig {
        make_rig(6, 70.0, 60.0, 1.5, (64, 128)).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = SceneConfig::default();
        let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(0), &p, &rig(), 0).unwrap();
        let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(0), &p, &rig(), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_objects_gives_empty_scene() {
        let p = SceneConfig {
            n_objects_min: 0,
            n_objects_max: 0,
            ..SceneConfig::default()
        };
        let s = sample_scene(&mut ChaCha8Rng::seed_from_u64(3), &p, &rig(), 0).unwrap();
        assert!(s.objects.is_empty());
    }

    #[test]
    fn centers_stay_inside_world_radius() {
        let p = SceneConfig {
            world_radius_m: 30.0,
            ..SceneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for id in 0..50 {
            let s = sample_scene(&mut rng, &p, &rig(), id).unwrap();
            assert!(s.objects.len() >= p.n_objects_min && s.objects.len() <= p.n_objects_max);
            for o in &s.objects {
                assert!(o.center[0].hypot(o.center[1]) <= 30.0 + 1e-9);
                assert!(o.size.iter().all(|&d| d > 0.0));
                assert!(o.yaw > -PI && o.yaw <= PI);
                assert!(visible_anywhere(&rig(), o));
            }
        }
    }

    #[test]
    fn static_world_rolls_back_to_itself() {
        let o = Object3D {
            center: [10.0, 3.0, 0.8],
            size: [4.0, 2.0, 1.6],
            yaw: 0.3,
            velocity: [0.0, 0.0],
            class_id: 0,
        };
        assert_eq!(o.at_previous(&EgoMotion::default(), FRAME_DT), o);
    }

    #[test]
    fn rollback_accounts_for_ego_translation() {
        let o = Object3D {
            center: [10.0, 0.0, 0.8],
            size: [4.0, 2.0, 1.6],
            yaw: 0.0,
            velocity: [2.0, 0.0],
            class_id: 0,
        };
        let ego = EgoMotion {
            dx: 5.0,
            dy: 0.0,
            dyaw: 0.0,
        };
        let prev = o.at_previous(&ego, 0.5);
        // world position 10 - 1 = 9 in the t frame, ego was 5 m behind.
        assert!((prev.center[0] - 14.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 7.0] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI);
            assert!(((w - a) / (2.0 * PI)).fract().abs() < 1e-9 || ((w - a) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
