//! Central finite-difference oracle for the hand-written backward passes.
//!
//! Every loss in this crate is piecewise smooth: footprint truncation, alpha
//! clamping, pixel validity and the L1 kink switch between smooth pieces.
//! Each evaluation therefore also reports a discrete signature, and a
//! parameter is only compared when both probes stay on the same piece.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Gaussian, GaussianSet, Pose, Quaternion};
use crate::recon::{LabelImage, LossWeights, ReconTargets};
use crate::splat::{render_signature, render_views, render_with_gradients, DepthImage, GradientBundle};

/// Step used on raw parameters.
pub const FD_STEP: f64 = 1e-4;
/// Pass threshold on the maximum relative error.
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding do not dominate the report.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose probes crossed a discontinuity.
    pub skipped: usize,
    /// Index, analytic and numeric value of the worst parameter.
    pub worst: Option<(usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < FD_TOLERANCE
    }

    pub fn merge(&mut self, other: &FdReport) {
        if other.checked > 0 && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Compares `analytic` against central differences of `eval`, which returns
/// `(loss, signature)` for a parameter vector.
pub fn check_gradient<F>(params: &[f64], analytic: &[f64], h: f64, eval: F) -> FdReport
where
    F: Fn(&[f64]) -> (f64, u64) + Sync,
{
    assert_eq!(params.len(), analytic.len());
    let (_, base_sig) = eval(params);
    let results: Vec<Option<(usize, f64, f64)>> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            p[i] = params[i] + h;
            let (lp, sp) = eval(&p);
            p[i] = params[i] - h;
            let (lm, sm) = eval(&p);
            if sp != base_sig || sm != base_sig {
                return None;
            }
            Some((i, analytic[i], (lp - lm) / (2.0 * h)))
        })
        .collect();
    let mut report = FdReport::default();
    for r in results {
        match r {
            None => report.skipped += 1,
            Some((i, a, n)) => {
                report.checked += 1;
                let e = relative_error(a, n);
                if report.worst.is_none() || e > report.max_rel_error {
                    report.max_rel_error = e;
                    report.worst = Some((i, a, n));
                }
            }
        }
    }
    report
}

/// Summed stage-one loss over several views plus its discrete signature.
pub fn multiview_loss(
    set: &GaussianSet,
    views: &[(Camera, ReconTargets)],
    weights: &LossWeights,
) -> Result<(f64, u64)> {
    let mut total = 0.0;
    let mut h = DefaultHasher::new();
    for (cam, targets) in views {
        let (depth, sem) = render_views(set, cam);
        total += crate::recon::stage1_loss(&depth, &sem, targets, weights)?.total;
        render_signature(set, cam).hash(&mut h);
        // Sign of each masked residual: the L1 kink.
        for target in [&targets.sparse_depth, &targets.dense_depth] {
            for i in 0..target.valid.len() {
                if target.valid[i] && depth.valid[i] {
                    (depth.depth[i] > target.depth[i]).hash(&mut h);
                }
            }
        }
    }
    Ok((total, h.finish()))
}

/// Analytic summed gradient over several views.
pub fn multiview_gradients(
    set: &GaussianSet,
    views: &[(Camera, ReconTargets)],
    weights: &LossWeights,
) -> Result<(f64, GradientBundle)> {
    let mut total = 0.0;
    let mut grads = GradientBundle::zeros(set);
    for (cam, targets) in views {
        let (loss, g) = render_with_gradients(set, cam, targets, weights)?;
        total += loss.total;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Finite-difference check of [`render_with_gradients`] over all raw
/// parameters of `set`.
pub fn check_render_gradients(
    set: &GaussianSet,
    views: &[(Camera, ReconTargets)],
    weights: &LossWeights,
    h: f64,
) -> Result<FdReport> {
    let (_, grads) = multiview_gradients(set, views, weights)?;
    let analytic = grads.flatten();
    let params = set.raw_params();
    let eval = |p: &[f64]| {
        let mut probe = set.clone();
        probe.set_raw_params(p).expect("layout preserved");
        multiview_loss(&probe, views, weights).expect("shapes validated")
    };
    Ok(check_gradient(&params, &analytic, h, eval))
}

/// A seeded random scene for gradient checks.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub set: GaussianSet,
    pub camera: Camera,
    pub targets: ReconTargets,
}

/// `gaussians` random Gaussians 2–6 m in front of a camera at the origin
/// (square image of side `image`, focal length `0.625·image`), with random
/// dense depth, 30% sparse depth and random labels over `classes`.
pub fn random_case(seed: u64, gaussians: usize, classes: usize, image: usize) -> Result<GradCase> {
    if classes == 0 || image == 0 {
        return Err(Error::invalid("random case needs classes and a non-empty image"));
    }
    let f = 0.625 * image as f64;
    let c = 0.5 * image as f64;
    let camera = Camera::new(f, f, c, c, image, image, Pose::identity())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = Vec::with_capacity(gaussians);
    for _ in 0..gaussians {
        let z = rng.random_range(2.0..6.0);
        let mean = Vector3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.5..0.5) * z, z);
        let scale = Vector3::new(rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
        let q = loop {
            let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if let Ok(q) = Quaternion::new(v[0], v[1], v[2], v[3]) {
                break q;
            }
        };
        let logits = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        gs.push(Gaussian::new(mean, scale, q, rng.random_range(0.2..0.95), logits, vec![0.0])?);
    }
    let set = GaussianSet::from_gaussians(classes, 1, gs)?;
    let n = camera.pixel_count();
    let dense: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..8.0)).collect();
    let sparse_valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let targets = ReconTargets {
        sparse_depth: DepthImage { width: image, height: image, depth: dense.clone(), valid: sparse_valid },
        dense_depth: DepthImage { width: image, height: image, depth: dense, valid: vec![true; n] },
        labels: LabelImage {
            width: image,
            height: image,
            labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
            valid: vec![true; n],
        },
    };
    Ok(GradCase { set, camera, targets })
}

impl GradCase {
    pub fn check(&self, weights: &LossWeights, h: f64) -> Result<FdReport> {
        check_render_gradients(&self.set, &[(self.camera.clone(), self.targets.clone())], weights, h)
    }
}
