//! Procedural driving scenes and exact ray-cast supervision.
//!
//! The world frame has `z` up with the ground plane at `z = 0`. Boxes rest
//! on the ground and move at constant velocity; the ego follows a constant
//! speed, constant yaw-rate path sampled at [`FRAME_DT`]. Cameras are
//! mounted relative to the ego frame (`x` forward, `y` left, `z` up).

mod oracle;

pub use oracle::{
    ego_velocity, ego_waypoints, next_from_current, oracle_gaussians, oracle_render, scene_occupancy_gt,
    OracleGaussians, PerceptionOptions, MAX_DEPTH,
};

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};

pub const CLASS_EMPTY: usize = 0;
pub const CLASS_GROUND: usize = 1;
pub const CLASS_STATIC: usize = 2;
pub const CLASS_MOVING: usize = 3;
pub const CLASS_COUNT: usize = 4;
/// Oracle feature layout: class one-hot (4), absolute velocity xy / 10,
/// ego-relative velocity xy / 10, height / 4, constant 1.
pub const FEATURE_DIM: usize = 10;
/// Frame spacing in seconds (2 Hz).
pub const FRAME_DT: f64 = 0.5;
pub const SCENE_VERSION: u32 = 1;
const WORLD_LIMIT: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxPrimitive {
    /// World position at frame 0.
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    /// World velocity in m/s.
    pub velocity: [f64; 3],
}

impl BoxPrimitive {
    pub fn center_at(&self, t: usize) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.velocity) * (t as f64 * FRAME_DT)
    }

    /// Closed containment test at frame `t`.
    pub fn contains(&self, t: usize, p: &Vector3<f64>) -> bool {
        let local = self.to_local(t, p);
        (0..3).all(|a| local[a].abs() <= self.half_extents[a])
    }

    pub(crate) fn to_local(&self, t: usize, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center_at(t);
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub(crate) fn rotate_to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z)
    }

    fn footprint_corners(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let r = Matrix2::new(c, -s, s, c);
        let h = Vector2::new(self.half_extents[0], self.half_extents[1]);
        let ctr = Vector2::new(self.center[0], self.center[1]);
        [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .map(|(a, b)| ctr + r * Vector2::new(a * h.x, b * h.y))
    }

    fn footprint_axes(&self) -> [Vector2<f64>; 2] {
        let (s, c) = self.yaw.sin_cos();
        [Vector2::new(c, s), Vector2::new(-s, c)]
    }
}

/// Separating-axis test on the ground footprints at frame 0, with `gap`
/// metres of required clearance.
pub fn boxes_overlap(a: &BoxPrimitive, b: &BoxPrimitive, gap: f64) -> bool {
    let ca = a.footprint_corners();
    let cb = b.footprint_corners();
    for axis in a.footprint_axes().into_iter().chain(b.footprint_axes()) {
        let proj = |cs: &[Vector2<f64>; 4]| {
            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p.dot(&axis);
                (lo.min(d), hi.max(d))
            })
        };
        let (a0, a1) = proj(&ca);
        let (b0, b1) = proj(&cb);
        if a1 + gap < b0 || b1 + gap < a0 {
            return false;
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub version: u32,
    pub seed: u64,
    pub ground_class: usize,
    pub boxes: Vec<BoxPrimitive>,
    /// `world_from_ego` per frame.
    pub ego_trajectory: Vec<Pose>,
    /// Cameras with `world_from_cam` read as `ego_from_cam`.
    pub cameras: Vec<Camera>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != SCENE_VERSION {
            return Err(Error::invalid(format!("unsupported scene version {}", self.version)));
        }
        if self.ground_class >= CLASS_COUNT {
            return Err(Error::invalid("ground class out of range"));
        }
        if self.ego_trajectory.is_empty() || self.cameras.is_empty() {
            return Err(Error::invalid("scene needs at least one frame and one camera"));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let finite = b.center.iter().chain(&b.velocity).chain(&b.half_extents).all(|v| v.is_finite());
            if !finite || b.half_extents.iter().any(|h| *h <= 0.0) || !b.yaw.is_finite() {
                return Err(Error::invalid(format!("box {i} has invalid geometry")));
            }
            if b.class_id >= CLASS_COUNT {
                return Err(Error::invalid(format!("box {i} class {} out of range", b.class_id)));
            }
            if b.center.iter().any(|c| c.abs() > WORLD_LIMIT) {
                return Err(Error::invalid(format!("box {i} outside world bounds")));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.ego_trajectory.len()
    }

    pub fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.frame_count() {
            return Err(Error::invalid(format!("frame {t} outside trajectory of {} frames", self.frame_count())));
        }
        Ok(())
    }

    /// Camera `index` placed in the ego frame of `t`.
    pub fn camera(&self, index: usize) -> Result<&Camera> {
        self.cameras
            .get(index)
            .ok_or_else(|| Error::invalid(format!("camera {index} out of range ({} cameras)", self.cameras.len())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: SceneSpec = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Camera rig mounted on the ego vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigOptions {
    pub image_size: usize,
    pub hfov_deg: f64,
    pub pitch_deg: f64,
    pub mount_height: f64,
    /// Add a rear-facing camera next to the front one.
    pub rear_camera: bool,
}

impl Default for RigOptions {
    fn default() -> Self {
        RigOptions { image_size: 64, hfov_deg: 90.0, pitch_deg: 20.0, mount_height: 1.5, rear_camera: true }
    }
}

pub fn default_rig(opts: &RigOptions) -> Result<Vec<Camera>> {
    let mut dirs = vec![1.0];
    if opts.rear_camera {
        dirs.push(-1.0);
    }
    let pitch = opts.pitch_deg.to_radians();
    dirs.into_iter()
        .map(|sx| {
            let eye = Vector3::new(0.5 * sx, 0.0, opts.mount_height);
            let target = eye + Vector3::new(sx * pitch.cos(), 0.0, -pitch.sin());
            let pose = Camera::look_at(eye, target, Vector3::z())?;
            Camera::with_horizontal_fov(opts.image_size, opts.image_size, opts.hfov_deg.to_radians(), pose)
        })
        .collect()
}

/// Knobs for [`generate_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneKnobs {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Upper bound on box speed in m/s.
    pub max_speed: f64,
    pub moving_fraction: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub frames: usize,
    /// Boxes are placed within this distance of the ego path.
    pub world_half_extent: f64,
    /// Boxes keep clear of `|y| < corridor` so the ego path stays free.
    pub corridor: f64,
    pub rig: RigOptions,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        SceneKnobs {
            min_boxes: 3,
            max_boxes: 6,
            max_speed: 3.0,
            moving_fraction: 0.5,
            ego_speed: 4.0,
            ego_yaw_rate: 0.0,
            frames: 8,
            world_half_extent: 20.0,
            corridor: 2.5,
            rig: RigOptions::default(),
        }
    }
}

/// Constant speed, constant yaw-rate path starting at the origin facing +x.
pub fn ego_path(speed: f64, yaw_rate: f64, frames: usize) -> Vec<Pose> {
    (0..frames)
        .map(|t| {
            let tau = t as f64 * FRAME_DT;
            let yaw = yaw_rate * tau;
            let (x, y) = if yaw_rate.abs() < 1e-12 {
                (speed * tau, 0.0)
            } else {
                (speed / yaw_rate * yaw.sin(), speed / yaw_rate * (1.0 - yaw.cos()))
            };
            Pose::from_yaw(yaw, Vector3::new(x, y, 0.0))
        })
        .collect()
}

pub fn generate_scene(seed: u64, knobs: &SceneKnobs) -> Result<SceneSpec> {
    if knobs.min_boxes > knobs.max_boxes || knobs.frames == 0 || knobs.max_speed < 0.0 {
        return Err(Error::invalid("inconsistent scene knobs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(knobs.min_boxes..=knobs.max_boxes);
    let w = knobs.world_half_extent;
    let travel = knobs.ego_speed * FRAME_DT * knobs.frames as f64;
    let mut boxes: Vec<BoxPrimitive> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::invalid("could not place non-overlapping boxes"));
        }
        let half: [f64; 3] = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..1.5)];
        let x = rng.random_range(-w..w + travel);
        let y = rng.random_range(-w..w);
        let reach = (half[0] * half[0] + half[1] * half[1]).sqrt();
        if y.abs() - reach < knobs.corridor {
            continue;
        }
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let moving = rng.random_bool(knobs.moving_fraction.clamp(0.0, 1.0)) && knobs.max_speed > 0.0;
        let velocity = if moving {
            let speed = rng.random_range(0.25 * knobs.max_speed..=knobs.max_speed);
            [speed * yaw.cos(), speed * yaw.sin(), 0.0]
        } else {
            [0.0; 3]
        };
        let candidate = BoxPrimitive {
            center: [x, y, half[2]],
            half_extents: half,
            yaw,
            class_id: if moving { CLASS_MOVING } else { CLASS_STATIC },
            velocity,
        };
        if boxes.iter().any(|b| boxes_overlap(b, &candidate, 0.2)) {
            continue;
        }
        boxes.push(candidate);
    }
    let scene = SceneSpec {
        version: SCENE_VERSION,
        seed,
        ground_class: CLASS_GROUND,
        boxes,
        ego_trajectory: ego_path(knobs.ego_speed, knobs.ego_yaw_rate, knobs.frames),
        cameras: default_rig(&knobs.rig)?,
    };
    scene.validate()?;
    Ok(scene)
}

/// One static box in front of a parked ego; the stage-one fitting benchmark.
pub fn canonical_scene() -> SceneSpec {
    SceneSpec {
        version: SCENE_VERSION,
        seed: 0,
        ground_class: CLASS_GROUND,
        boxes: vec![BoxPrimitive {
            center: [6.0, 0.5, 0.75],
            half_extents: [0.75, 0.75, 0.75],
            yaw: 0.3,
            class_id: CLASS_STATIC,
            velocity: [0.0; 3],
        }],
        ego_trajectory: ego_path(0.0, 0.0, 1),
        cameras: default_rig(&RigOptions::default()).expect("default rig is valid"),
    }
}

/// A box crossing the ego path ahead while the ego drives forward.
pub fn moving_box_scene() -> SceneSpec {
    SceneSpec {
        version: SCENE_VERSION,
        seed: 1,
        ground_class: CLASS_GROUND,
        boxes: vec![
            BoxPrimitive {
                center: [9.0, -3.0, 0.8],
                half_extents: [1.2, 0.8, 0.8],
                yaw: std::f64::consts::FRAC_PI_2,
                class_id: CLASS_MOVING,
                velocity: [0.0, 3.0, 0.0],
            },
            BoxPrimitive {
                center: [12.0, 6.0, 1.0],
                half_extents: [1.0, 1.0, 1.0],
                yaw: 0.0,
                class_id: CLASS_STATIC,
                velocity: [0.0; 3],
            },
        ],
        ego_trajectory: ego_path(4.0, 0.0, 4),
        cameras: default_rig(&RigOptions::default()).expect("default rig is valid"),
    }
}
