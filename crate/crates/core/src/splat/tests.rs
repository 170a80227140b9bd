use approx::assert_abs_diff_eq;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{Gaussian, Quaternion};
use crate::gradcheck::{check_render_gradients, FD_STEP, FD_TOLERANCE};
use crate::recon::{LabelImage, LossWeights, ReconTargets};

/// Camera at the origin looking down +z (identity pose).
fn axis_camera(size: usize, f: f64, c: f64) -> Camera {
    Camera::new(f, f, c, c, size, size, Pose::identity()).unwrap()
}

fn gaussian(mean: [f64; 3], scale: f64, opacity: f64, logits: Vec<f64>) -> Gaussian {
    Gaussian::new(
        Vector3::from(mean),
        Vector3::repeat(scale),
        Quaternion::IDENTITY,
        opacity,
        logits,
        vec![0.0],
    )
    .unwrap()
}

#[test]
fn projection_on_axis() {
    let cam = axis_camera(128, 100.0, 64.0);
    let g = gaussian([0.0, 0.0, 5.0], 0.5, 0.5, vec![0.0]);
    let p = project_gaussian(&g, 0, &cam).unwrap();
    assert_abs_diff_eq!(p.mean2d, Vector2::new(64.0, 64.0), epsilon = 1e-12);
    assert_eq!(p.depth, 5.0);
    // (f/z)² s² = 400 · 0.25, plus the diagonal floor.
    assert_abs_diff_eq!(p.cov2d[(0, 0)], 100.0 + COV2D_FLOOR, epsilon = 1e-9);
    assert_abs_diff_eq!(p.cov2d[(1, 1)], 100.0 + COV2D_FLOOR, epsilon = 1e-9);
    assert_abs_diff_eq!(p.cov2d[(0, 1)], 0.0, epsilon = 1e-12);
}

#[test]
fn projection_culls_behind_camera() {
    let cam = axis_camera(128, 100.0, 64.0);
    assert!(project_gaussian(&gaussian([0.0, 0.0, -5.0], 0.5, 0.5, vec![0.0]), 0, &cam).is_none());
    assert!(project_gaussian(&gaussian([0.0, 0.0, 0.05], 0.5, 0.5, vec![0.0]), 0, &cam).is_none());
    // Far outside the image.
    assert!(project_gaussian(&gaussian([100.0, 0.0, 5.0], 0.1, 0.5, vec![0.0]), 0, &cam).is_none());
}

/// Screen covariance against the empirical covariance of projected samples.
#[test]
fn projection_covariance_matches_sampling() {
    let cam = axis_camera(128, 100.0, 64.0);
    let q = Quaternion::new(0.9, 0.2, -0.1, 0.3).unwrap();
    let g = Gaussian::new(Vector3::new(0.3, -0.2, 6.0), Vector3::new(0.05, 0.02, 0.03), q, 0.5, vec![0.0], vec![0.0]).unwrap();
    let p = project_gaussian(&g, 0, &cam).unwrap();
    let sigma = g.covariance();
    let chol = sigma.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = rand_distr::StandardNormal;
    let n = 200_000;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let z = Vector3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
        let x = g.mean + chol * z;
        pts.push(Vector2::new(cam.fx * x.x / x.z + cam.cx, cam.fy * x.y / x.z + cam.cy));
    }
    let mean = pts.iter().sum::<Vector2<f64>>() / n as f64;
    let cov = pts.iter().map(|v| (v - mean) * (v - mean).transpose()).sum::<Matrix2<f64>>() / n as f64;
    let analytic = p.cov2d - Matrix2::identity() * COV2D_FLOOR;
    for i in 0..2 {
        for j in 0..2 {
            assert!((cov[(i, j)] - analytic[(i, j)]).abs() < 0.02 * analytic.abs().max(), "{cov} vs {analytic}");
        }
    }
}

#[test]
fn empty_set_renders_nothing() {
    let cam = axis_camera(16, 20.0, 8.0);
    let set = GaussianSet::new(3, 1).unwrap();
    let (d, s) = render_views(&set, &cam);
    assert!(d.valid.iter().all(|v| !v));
    assert!(s.weight.iter().all(|w| *w == 0.0));
}

#[test]
fn single_opaque_gaussian() {
    // Principal point on a pixel centre so the mean projects exactly there.
    let cam = axis_camera(17, 20.0, 8.5);
    let set = GaussianSet::from_gaussians(1, 1, vec![gaussian([0.0, 0.0, 3.0], 0.3, 1.0, vec![2.0])]).unwrap();
    let (d, s) = render_views(&set, &cam);
    let i = 8 * 17 + 8;
    assert_abs_diff_eq!(d.depth[i], 3.0 * 0.999, epsilon = 1e-12);
    assert_abs_diff_eq!(s.weight[i], 0.999, epsilon = 1e-12);
    assert_abs_diff_eq!(s.pixel(i)[0], 2.0 * 0.999, epsilon = 1e-12);
    assert!(d.valid[i]);
}

#[test]
fn two_half_transparent_gaussians() {
    let cam = axis_camera(17, 20.0, 8.5);
    let set = GaussianSet::from_gaussians(
        1,
        1,
        vec![gaussian([0.0, 0.0, 2.0], 0.2, 0.5, vec![0.0]), gaussian([0.0, 0.0, 1.0], 0.1, 0.5, vec![0.0])],
    )
    .unwrap();
    let (d, s) = render_views(&set, &cam);
    let i = 8 * 17 + 8;
    assert_abs_diff_eq!(d.depth[i], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.weight[i], 0.75, epsilon = 1e-12);
}

#[test]
fn saturated_front_gaussian_occludes() {
    let cam = axis_camera(17, 20.0, 8.5);
    let front = gaussian([0.0, 0.0, 2.0], 0.5, 1.0, vec![0.0]);
    let back = gaussian([0.0, 0.0, 6.0], 0.5, 0.8, vec![0.0]);
    let set = GaussianSet::from_gaussians(1, 1, vec![front.clone(), back.clone()]).unwrap();
    let (d0, _) = render_views(&set, &cam);
    // Raise the front opacity logit further: alpha stays clamped.
    let mut f2 = front;
    f2.set_opacity_logit(f2.opacity_logit() + 5.0);
    let mut f3 = f2.clone();
    f3.set_opacity_logit(f64::INFINITY);
    for f in [f2, f3] {
        let set2 = GaussianSet::from_gaussians(1, 1, vec![f, back.clone()]).unwrap();
        let (d1, _) = render_views(&set2, &cam);
        let i = 8 * 17 + 8;
        assert_eq!(d0.depth[i], d1.depth[i]);
        // Occluded contribution is bounded by the residual transmittance.
        assert!((d0.depth[i] - 2.0 * 0.999).abs() <= 6.0 * 0.001 + 1e-12);
    }
}

pub(crate) fn random_scene(seed: u64, k: usize, c: usize) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = Vec::new();
    for _ in 0..k {
        let z = rng.random_range(2.0..6.0);
        let mean = Vector3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.5..0.5) * z, z);
        let scale = Vector3::new(rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
        let q = Quaternion::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).unwrap();
        let logits = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        gs.push(Gaussian::new(mean, scale, q, rng.random_range(0.2..0.95), logits, vec![0.0]).unwrap());
    }
    GaussianSet::from_gaussians(c, 1, gs).unwrap()
}

pub(crate) fn random_targets(seed: u64, cam: &Camera, c: usize) -> ReconTargets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = cam.pixel_count();
    let dense: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..8.0)).collect();
    let sparse_valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    ReconTargets {
        sparse_depth: DepthImage { width: cam.width, height: cam.height, depth: dense.clone(), valid: sparse_valid },
        dense_depth: DepthImage { width: cam.width, height: cam.height, depth: dense, valid: vec![true; n] },
        labels: LabelImage {
            width: cam.width,
            height: cam.height,
            labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
            valid: vec![true; n],
        },
    }
}

#[test]
fn permutation_invariance() {
    let cam = axis_camera(32, 20.0, 16.0);
    let set = random_scene(11, 20, 3);
    let mut rev: Vec<Gaussian> = set.gaussians().to_vec();
    rev.reverse();
    let rev = GaussianSet::from_gaussians(3, 1, rev).unwrap();
    assert_eq!(render_views(&set, &cam), render_views(&rev, &cam));
}

#[test]
fn weight_bounds_and_monotonicity() {
    let cam = axis_camera(32, 20.0, 16.0);
    let full = random_scene(5, 24, 2);
    let mut prev = vec![0.0; cam.pixel_count()];
    for k in 0..=full.len() {
        let sub = GaussianSet::from_gaussians(2, 1, full.gaussians()[..k].to_vec()).unwrap();
        let (_, s) = render_views(&sub, &cam);
        for (w, p) in s.weight.iter().zip(&prev) {
            assert!((0.0..=1.0).contains(w));
            assert!(*w >= *p - 1e-15);
        }
        prev = s.weight;
    }
}

#[test]
fn zero_opacity_has_no_logit_gradient() {
    let cam = axis_camera(32, 20.0, 16.0);
    let mut set = random_scene(2, 8, 3);
    for g in set.gaussians_mut() {
        g.set_opacity(0.0).unwrap();
    }
    let targets = random_targets(2, &cam, 3);
    let (_, grads) = render_with_gradients(&set, &cam, &targets, &LossWeights::default()).unwrap();
    assert!(grads.logits.iter().flatten().all(|v| *v == 0.0));
    assert!(grads.is_finite());
}

#[test]
fn target_shape_mismatch() {
    let cam = axis_camera(32, 20.0, 16.0);
    let other = axis_camera(16, 20.0, 8.0);
    let set = random_scene(1, 3, 3);
    let targets = random_targets(1, &other, 3);
    assert!(render_with_gradients(&set, &cam, &targets, &LossWeights::default()).is_err());
}

#[test]
fn single_gaussian_mean_z_gradient() {
    let cam = axis_camera(32, 20.0, 16.0);
    let set = GaussianSet::from_gaussians(
        2,
        1,
        vec![Gaussian::new(Vector3::new(0.1, -0.2, 3.0), Vector3::new(0.8, 0.6, 0.5), Quaternion::IDENTITY, 0.9, vec![0.5, -0.5], vec![0.0]).unwrap()],
    )
    .unwrap();
    let targets = random_targets(4, &cam, 2);
    let w = LossWeights::default();
    let (_, grads) = render_with_gradients(&set, &cam, &targets, &w).unwrap();
    let loss_at = |dz: f64| {
        let mut s = set.clone();
        s.gaussians_mut()[0].mean.z += dz;
        let (d, sem) = render_views(&s, &cam);
        crate::recon::stage1_loss(&d, &sem, &targets, &w).unwrap().total
    };
    let fd = (loss_at(1e-4) - loss_at(-1e-4)) / 2e-4;
    let an = grads.mean[0].z;
    assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-3, "fd {fd} analytic {an}");
}

#[test]
fn random_scene_gradients_match_finite_differences() {
    let cam = axis_camera(32, 20.0, 16.0);
    let set = random_scene(7, 20, 3);
    let targets = random_targets(7, &cam, 3);
    let report = check_render_gradients(&set, &[(cam, targets)], &LossWeights::default(), FD_STEP).unwrap();
    assert!(report.checked > report.skipped, "{report:?}");
    assert!(report.max_rel_error < FD_TOLERANCE, "{report:?}");
}
