use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SceneSpec, CLASS_COUNT, FEATURE_DIM, FRAME_DT};
use crate::error::{Error, Result};
use crate::geometry::{relative_pose, Gaussian, GaussianSet, Pose, Quaternion};
use crate::occupancy::{OccSpec, OccupancyGrid, EMPTY};
use crate::recon::{LabelImage, ReconTargets};
use crate::splat::DepthImage;

/// Rays report no return beyond this camera depth.
pub const MAX_DEPTH: f64 = 30.0;

/// Nearest hit along `origin + s·dir`, as `(s, class)`. With `dir` scaled to
/// unit camera-z, `s` is the camera depth.
pub(crate) fn cast(scene: &SceneSpec, t: usize, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    let mut consider = |s: f64, class: usize| {
        if s > 0.0 && s <= MAX_DEPTH && best.is_none_or(|(b, _)| s < b) {
            best = Some((s, class));
        }
    };
    if dir.z < 0.0 {
        consider(-origin.z / dir.z, scene.ground_class);
    }
    for b in &scene.boxes {
        let o = b.to_local(t, origin);
        let d = b.rotate_to_local(dir);
        let mut enter = f64::NEG_INFINITY;
        let mut exit = f64::INFINITY;
        let mut hit = true;
        for a in 0..3 {
            let h = b.half_extents[a];
            if d[a] == 0.0 {
                if o[a].abs() > h {
                    hit = false;
                    break;
                }
                continue;
            }
            let (s0, s1) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
            enter = enter.max(s0.min(s1));
            exit = exit.min(s0.max(s1));
        }
        if hit && enter <= exit && enter > 0.0 {
            consider(enter, b.class_id);
        }
    }
    best
}

fn sparse_seed(scene: &SceneSpec, t: usize, cam: usize) -> u64 {
    scene.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((t as u64) << 32) ^ cam as u64
}

/// Exact depth and labels for camera `cam_index` at frame `t`. Pixels whose
/// ray hits nothing within [`MAX_DEPTH`] have no depth and no label. The
/// sparse depth keeps each valid pixel with probability `sparse_rate`.
pub fn oracle_render(scene: &SceneSpec, t: usize, cam_index: usize, sparse_rate: f64) -> Result<ReconTargets> {
    scene.check_frame(t)?;
    let cam = scene.camera(cam_index)?;
    let world_from_cam = scene.ego_trajectory[t].compose(&cam.world_from_cam);
    let origin = *world_from_cam.translation();
    let (w, h) = (cam.width, cam.height);
    let hits: Vec<Option<(f64, usize)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = crate::geometry::pixel_center(i % w, i / w);
            let d = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
            cast(scene, t, &origin, &world_from_cam.apply_vector(&d))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sparse_seed(scene, t, cam_index));
    let mut dense = DepthImage::invalid(w, h);
    let mut sparse = DepthImage::invalid(w, h);
    let mut labels = LabelImage { width: w, height: h, labels: vec![0; w * h], valid: vec![false; w * h] };
    for (i, hit) in hits.iter().enumerate() {
        let keep = rng.random::<f64>() < sparse_rate;
        if let Some((s, class)) = *hit {
            dense.depth[i] = s;
            dense.valid[i] = true;
            labels.labels[i] = class;
            labels.valid[i] = true;
            if keep {
                sparse.depth[i] = s;
                sparse.valid[i] = true;
            }
        }
    }
    Ok(ReconTargets { sparse_depth: sparse, dense_depth: dense, labels })
}

/// Voxels whose centre lies in a box take its class; voxels whose centre is
/// within half a voxel of the ground plane take the ground class.
pub fn scene_occupancy_gt(scene: &SceneSpec, t: usize, spec: &OccSpec) -> Result<OccupancyGrid> {
    scene.check_frame(t)?;
    spec.validate()?;
    if spec.class_count < CLASS_COUNT {
        return Err(Error::invalid("occupancy spec has fewer classes than the scene"));
    }
    let ego = &scene.ego_trajectory[t];
    let half_dz = 0.5 * spec.voxel_size().z;
    let labels = (0..spec.voxel_count())
        .into_par_iter()
        .map(|i| {
            let (ix, iy, iz) = spec.unravel(i);
            let p = ego.apply(&spec.voxel_center(ix, iy, iz));
            if let Some(b) = scene.boxes.iter().find(|b| b.contains(t, &p)) {
                b.class_id as u8
            } else if p.z.abs() <= half_dz {
                scene.ground_class as u8
            } else {
                EMPTY
            }
        })
        .collect();
    Ok(OccupancyGrid { spec: *spec, labels })
}

/// World velocity of the ego at frame `t` (forward difference, backward at
/// the last frame, zero for single-frame scenes).
pub fn ego_velocity(scene: &SceneSpec, t: usize) -> Vector3<f64> {
    let n = scene.frame_count();
    if n < 2 {
        return Vector3::zeros();
    }
    let (a, b) = if t + 1 < n { (t, t + 1) } else { (n - 2, n - 1) };
    (scene.ego_trajectory[b].translation() - scene.ego_trajectory[a].translation()) / FRAME_DT
}

/// Maps ego frame `t` coordinates into ego frame `t + 1`.
pub fn next_from_current(scene: &SceneSpec, t: usize) -> Result<Pose> {
    scene.check_frame(t + 1)?;
    Ok(relative_pose(&scene.ego_trajectory[t], &scene.ego_trajectory[t + 1]))
}

/// Future ego positions `t+1 ..= t+n` in the ego frame of `t`.
pub fn ego_waypoints(scene: &SceneSpec, t: usize, n: usize) -> Result<Vec<[f64; 2]>> {
    scene.check_frame(t + n)?;
    let inv = scene.ego_trajectory[t].inverse();
    Ok((1..=n)
        .map(|i| {
            let p = inv.apply(scene.ego_trajectory[t + i].translation());
            [p.x, p.y]
        })
        .collect())
}

/// Settings of the oracle perception that turns a scene into Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionOptions {
    /// Ground Gaussians cover `|x|, |y| ≤ range` in the ego frame.
    pub range: f64,
    pub ground_spacing: f64,
    pub ground_sigma_xy: f64,
    pub ground_sigma_z: f64,
    pub box_spacing: f64,
    pub opacity: f64,
    pub logit_scale: f64,
}

impl Default for PerceptionOptions {
    fn default() -> Self {
        PerceptionOptions {
            range: 24.0,
            ground_spacing: 1.0,
            ground_sigma_xy: 0.6,
            ground_sigma_z: 0.15,
            box_spacing: 0.5,
            opacity: 0.9,
            logit_scale: 6.0,
        }
    }
}

/// Oracle Gaussians in the ego frame of one frame, with the displacement
/// each one undergoes until the next frame (in the same ego frame).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGaussians {
    pub set: GaussianSet,
    pub flow: Vec<Vector3<f64>>,
}

/// Perfect perception: a world-aligned ground lattice plus a box-aligned
/// lattice filling every box, with one-hot logits and velocity features.
pub fn oracle_gaussians(scene: &SceneSpec, t: usize, opts: &PerceptionOptions) -> Result<OracleGaussians> {
    scene.check_frame(t)?;
    if !(opts.ground_spacing > 0.0 && opts.box_spacing > 0.0 && opts.range > 0.0) {
        return Err(Error::invalid("perception spacings and range must be positive"));
    }
    let ego = &scene.ego_trajectory[t];
    let inv = ego.inverse();
    let ego_yaw = ego.yaw();
    let v_ego = ego_velocity(scene, t);
    let mut set = GaussianSet::new(CLASS_COUNT, FEATURE_DIM)?;
    let mut flow = Vec::new();
    let mut push = |set: &mut GaussianSet,
                    mean: Vector3<f64>,
                    scale: Vector3<f64>,
                    q: Quaternion,
                    class: usize,
                    v_world: Vector3<f64>|
     -> Result<()> {
        let v_abs = inv.apply_vector(&v_world);
        let v_rel = inv.apply_vector(&(v_world - v_ego));
        let mut logits = vec![0.0; CLASS_COUNT];
        logits[class] = opts.logit_scale;
        let mut feature = vec![0.0; FEATURE_DIM];
        feature[class] = 1.0;
        feature[4] = v_abs.x / 10.0;
        feature[5] = v_abs.y / 10.0;
        feature[6] = v_rel.x / 10.0;
        feature[7] = v_rel.y / 10.0;
        feature[8] = mean.z / 4.0;
        feature[9] = 1.0;
        set.push(Gaussian::new(mean, scale, q, opts.opacity, logits, feature)?)?;
        flow.push(v_abs * FRAME_DT);
        Ok(())
    };

    let s = opts.ground_spacing;
    let reach = opts.range * std::f64::consts::SQRT_2;
    let c = ego.translation();
    let (i0, i1) = (((c.x - reach) / s).floor() as i64, ((c.x + reach) / s).ceil() as i64);
    let (j0, j1) = (((c.y - reach) / s).floor() as i64, ((c.y + reach) / s).ceil() as i64);
    let ground_scale = Vector3::new(opts.ground_sigma_xy, opts.ground_sigma_xy, opts.ground_sigma_z);
    let ground_q = Quaternion::from_yaw(-ego_yaw);
    for i in i0..=i1 {
        for j in j0..=j1 {
            let p = inv.apply(&Vector3::new(i as f64 * s, j as f64 * s, 0.0));
            if p.x.abs() <= opts.range && p.y.abs() <= opts.range {
                push(&mut set, p, ground_scale, ground_q, scene.ground_class, Vector3::zeros())?;
            }
        }
    }

    for b in &scene.boxes {
        let centre = b.center_at(t);
        let local_centre = inv.apply(&centre);
        let radius = b.half_extents[0].hypot(b.half_extents[1]);
        if local_centre.x.abs() > opts.range + radius || local_centre.y.abs() > opts.range + radius {
            continue;
        }
        let n: Vec<usize> = b.half_extents.iter().map(|h| ((2.0 * h / opts.box_spacing).ceil() as usize).max(1)).collect();
        let step: Vec<f64> = (0..3).map(|a| 2.0 * b.half_extents[a] / n[a] as f64).collect();
        let scale = Vector3::new(0.5 * step[0], 0.5 * step[1], 0.5 * step[2]);
        let q = Quaternion::from_yaw(b.yaw - ego_yaw);
        let box_pose = Pose::from_yaw(b.yaw, centre);
        for ia in 0..n[0] {
            for ib in 0..n[1] {
                for ic in 0..n[2] {
                    let lp = Vector3::new(
                        -b.half_extents[0] + (ia as f64 + 0.5) * step[0],
                        -b.half_extents[1] + (ib as f64 + 0.5) * step[1],
                        -b.half_extents[2] + (ic as f64 + 0.5) * step[2],
                    );
                    let p = inv.apply(&box_pose.apply(&lp));
                    push(&mut set, p, scale, q, b.class_id, Vector3::from(b.velocity))?;
                }
            }
        }
    }
    Ok(OracleGaussians { set, flow })
}
