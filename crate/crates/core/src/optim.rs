//! Adam and the stage-one fitting loop.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Gaussian, GaussianSet, Pose, Quaternion};
use crate::recon::{LossWeights, ReconTargets, Stage1Loss};
use crate::splat::{render_views, render_views_with, render_with_gradients_at, GradientBundle, ALPHA_MIN, VALID_WEIGHT};
use crate::synth::{oracle_render, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        OptimState { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "Adam shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let c = state.config;
    state.step += 1;
    let b1 = 1.0 - c.beta1.powi(state.step as i32);
    let b2 = 1.0 - c.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let mhat = state.m[i] / b1;
        let vhat = state.v[i] / b2;
        params[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * params[i]);
    }
    Ok(())
}

/// Adam on the unconstrained Gaussian parameters; quaternions are
/// renormalised after the update.
pub fn adam_step(set: &mut GaussianSet, grads: &GradientBundle, state: &mut OptimState) -> Result<()> {
    if grads.len() != set.len() {
        return Err(Error::invalid("gradient bundle does not match the set"));
    }
    let mut params = set.raw_params();
    adam_update(&mut params, &grads.flatten(), state)?;
    set.set_raw_params(&params)
}

/// A camera with its targets, posed in the frame the Gaussians live in.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub targets: ReconTargets,
}

/// Oracle views of `frames`, posed in the ego frame of `frames[0]`.
pub fn scene_views(scene: &SceneSpec, frames: &[usize], sparse_rate: f64) -> Result<Vec<View>> {
    let Some(&first) = frames.first() else {
        return Err(Error::invalid("at least one frame is required"));
    };
    scene.check_frame(first)?;
    let base = scene.ego_trajectory[first].inverse();
    let mut views = Vec::new();
    for &t in frames {
        scene.check_frame(t)?;
        let ego: Pose = base.compose(&scene.ego_trajectory[t]);
        for (ci, cam) in scene.cameras.iter().enumerate() {
            views.push(View {
                camera: cam.with_pose(ego.compose(&cam.world_from_cam)),
                targets: oracle_render(scene, t, ci, sparse_rate)?,
            });
        }
    }
    Ok(views)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub iters: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Iterations over which the validity threshold ramps from `1/255` up to
    /// the renderer's 0.5; zero trains at 0.5 throughout.
    pub validity_warmup: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { iters: 500, adam: AdamConfig::default(), weights: LossWeights::default(), validity_warmup: 400 }
    }
}

impl FitOptions {
    pub fn min_weight(&self, iter: usize) -> f64 {
        if iter >= self.validity_warmup {
            VALID_WEIGHT
        } else {
            ALPHA_MIN + (VALID_WEIGHT - ALPHA_MIN) * iter as f64 / self.validity_warmup as f64
        }
    }
}

/// Summed loss over all views and its gradient.
pub fn views_loss_and_gradients(
    set: &GaussianSet,
    views: &[View],
    weights: &LossWeights,
    min_weight: f64,
) -> Result<(Stage1Loss, GradientBundle)> {
    let mut loss = Stage1Loss::default();
    let mut grads = GradientBundle::zeros(set);
    for v in views {
        let (l, g) = render_with_gradients_at(set, &v.camera, &v.targets, weights, min_weight)?;
        loss.accumulate(&l);
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Fits `init` to the views with Adam; returns the final set and the loss
/// before every step.
pub fn fit_views(init: &GaussianSet, views: &[View], opts: &FitOptions) -> Result<(GaussianSet, Vec<Stage1Loss>)> {
    let mut set = init.clone();
    let mut state = OptimState::new(set.len() * set.params_per_gaussian(), opts.adam);
    let mut trace = Vec::with_capacity(opts.iters);
    for iter in 0..opts.iters {
        let (loss, grads) = views_loss_and_gradients(&set, views, &opts.weights, opts.min_weight(iter))?;
        if !grads.is_finite() {
            return Err(Error::invalid(format!("non-finite gradient at step {iter}")));
        }
        trace.push(loss);
        adam_step(&mut set, &grads, &mut state)?;
    }
    Ok((set, trace))
}

pub fn fit_stage1(
    scene: &SceneSpec,
    init: &GaussianSet,
    frames: &[usize],
    sparse_rate: f64,
    opts: &FitOptions,
) -> Result<(GaussianSet, Vec<Stage1Loss>)> {
    let views = scene_views(scene, frames, sparse_rate)?;
    fit_views(init, &views, opts)
}

/// Gaussians placed uniformly by volume in the union of the camera frusta
/// between `near` and `far` depth, with scale 0.5 m, opacity logit −2 and
/// uniform logits.
pub fn init_gaussians(
    cameras: &[Camera],
    count: usize,
    class_count: usize,
    feature_dim: usize,
    near: f64,
    far: f64,
    seed: u64,
) -> Result<GaussianSet> {
    if cameras.is_empty() || !(0.0 < near && near < far) {
        return Err(Error::invalid("init needs cameras and 0 < near < far"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::new(class_count, feature_dim)?;
    let (n3, f3) = (near.powi(3), far.powi(3));
    while set.len() < count {
        let cam = &cameras[rng.random_range(0..cameras.len())];
        let z = (n3 + rng.random::<f64>() * (f3 - n3)).cbrt();
        let u = rng.random::<f64>() * cam.width as f64;
        let v = rng.random::<f64>() * cam.height as f64;
        let p = Vector3::new((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
        let mut g = Gaussian::new(
            cam.world_from_cam.apply(&p),
            Vector3::repeat(0.5),
            Quaternion::IDENTITY,
            0.5,
            vec![0.0; class_count],
            vec![0.0; feature_dim],
        )?;
        g.set_opacity_logit(-2.0);
        set.push(g)?;
    }
    Ok(set)
}

/// Fit quality over a set of views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    /// Mean |D − D*| over target-valid dense pixels, using the accumulated
    /// depth whether or not the pixel reaches the validity threshold.
    pub depth_l1: f64,
    /// Fraction of labelled pixels that render valid with the right argmax.
    pub accuracy: f64,
}

pub fn evaluate_fit(set: &GaussianSet, views: &[View]) -> FitReport {
    let (mut err, mut n_depth, mut correct, mut n_label) = (0.0, 0usize, 0usize, 0usize);
    for v in views {
        let (raw, _) = render_views_with(set, &v.camera, 0.0);
        let (_, sem) = render_views(set, &v.camera);
        let t = &v.targets;
        for i in 0..v.camera.pixel_count() {
            if t.dense_depth.valid[i] {
                err += (raw.depth[i] - t.dense_depth.depth[i]).abs();
                n_depth += 1;
            }
            if t.labels.valid[i] {
                n_label += 1;
                if sem.is_valid(i) && sem.argmax(i) == t.labels.labels[i] {
                    correct += 1;
                }
            }
        }
    }
    FitReport {
        depth_l1: if n_depth > 0 { err / n_depth as f64 } else { 0.0 },
        accuracy: if n_label > 0 { correct as f64 / n_label as f64 } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = OptimState::new(3, AdamConfig::default());
        adam_update(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = vec![0.0, 0.0, 5.0];
        let cfg = AdamConfig { lr: 0.03, ..Default::default() };
        let mut s = OptimState::new(3, cfg);
        adam_update(&mut p, &[2.5, -0.1, 1e3], &mut s).unwrap();
        assert_abs_diff_eq!(p[0], -0.03, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], 0.03, epsilon = 1e-6);
        assert_abs_diff_eq!(p[2], 5.0 - 0.03, epsilon = 1e-8);
    }

    #[test]
    fn opposite_parameters_move_symmetrically() {
        let mut p = vec![1.5, -1.5];
        let mut s = OptimState::new(2, AdamConfig::default());
        for k in 0..5 {
            let g = [p[0] * (k as f64 + 1.0), p[1] * (k as f64 + 1.0)];
            adam_update(&mut p, &g, &mut s).unwrap();
            assert_eq!(p[0], -p[1]);
        }
    }

    #[test]
    fn small_step_small_change() {
        let mut p = vec![1.0; 4];
        let cfg = AdamConfig { lr: 1e-9, ..Default::default() };
        let mut s = OptimState::new(4, cfg);
        adam_update(&mut p, &[1.0, -3.0, 0.5, 7.0], &mut s).unwrap();
        assert!(p.iter().all(|v| (v - 1.0).abs() <= 1.0000001e-9));
    }

    #[test]
    fn shape_mismatch() {
        let mut s = OptimState::new(2, AdamConfig::default());
        assert!(matches!(adam_update(&mut [0.0; 3], &[0.0; 3], &mut s), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = vec![2.0];
        let mut s = OptimState::new(1, AdamConfig { weight_decay: 0.1, lr: 0.5, ..Default::default() });
        adam_update(&mut p, &[0.0], &mut s).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 - 0.5 * 0.1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_iterations_return_init() {
        let scene = crate::synth::canonical_scene();
        let init = init_gaussians(&scene.cameras, 8, 4, 1, 1.0, 10.0, 0).unwrap();
        let (out, trace) = fit_stage1(&scene, &init, &[0], 0.05, &FitOptions { iters: 0, ..Default::default() }).unwrap();
        assert_eq!(out, init);
        assert!(trace.is_empty());
    }

    #[test]
    fn init_lies_in_frusta() {
        let scene = crate::synth::canonical_scene();
        let init = init_gaussians(&scene.cameras, 64, 4, 1, 1.0, 20.0, 3).unwrap();
        assert_eq!(init.len(), 64);
        for g in init.iter() {
            assert_abs_diff_eq!(g.opacity_logit(), -2.0);
            assert_abs_diff_eq!(g.scale(), Vector3::repeat(0.5), epsilon = 1e-12);
            let inside = scene.cameras.iter().any(|c| {
                let p = c.cam_from_world().apply(&g.mean);
                let (u, v) = (c.fx * p.x / p.z + c.cx, c.fy * p.y / p.z + c.cy);
                (1.0 - 1e-9..=20.0 + 1e-9).contains(&p.z) && (0.0..=64.0).contains(&u) && (0.0..=64.0).contains(&v)
            });
            assert!(inside);
        }
    }
}
