//! Analytic gradients of the stage-one loss through the compositing chain.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{render_prepared, PreparedView, VALID_WEIGHT};
use crate::error::{Error, Result};
use crate::geometry::{Camera, GaussianSet};
use crate::recon::{stage1_loss, stage1_upstream, LossWeights, ReconTargets, Stage1Loss};

/// Per-Gaussian gradients, aligned with the set's order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub mean: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    /// Gradient w.r.t. the raw quaternion components; orthogonal to the
    /// stored unit quaternion.
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros(set: &GaussianSet) -> Self {
        let k = set.len();
        GradientBundle {
            mean: vec![Vector3::zeros(); k],
            log_scale: vec![Vector3::zeros(); k],
            rotation: vec![[0.0; 4]; k],
            opacity_logit: vec![0.0; k],
            logits: vec![vec![0.0; set.class_count()]; k],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for k in 0..self.len() {
            self.mean[k] += other.mean[k];
            self.log_scale[k] += other.log_scale[k];
            for i in 0..4 {
                self.rotation[k][i] += other.rotation[k][i];
            }
            self.opacity_logit[k] += other.opacity_logit[k];
            for (a, b) in self.logits[k].iter_mut().zip(&other.logits[k]) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.logits.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Screen-space gradient accumulator for one projected splat.
#[derive(Clone, Debug)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    logits: Vec<f64>,
}

impl SplatGrad {
    fn zero(c: usize) -> Self {
        SplatGrad {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            depth: 0.0,
            opacity: 0.0,
            logits: vec![0.0; c],
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.depth += o.depth;
        self.opacity += o.opacity;
        for (a, b) in self.logits.iter_mut().zip(&o.logits) {
            *a += b;
        }
    }
}

/// Renders `set`, evaluates the stage-one loss against `targets` and returns
/// its exact gradient w.r.t. every Gaussian parameter.
pub fn render_with_gradients(
    set: &GaussianSet,
    cam: &Camera,
    targets: &ReconTargets,
    weights: &LossWeights,
) -> Result<(Stage1Loss, GradientBundle)> {
    render_with_gradients_at(set, cam, targets, weights, VALID_WEIGHT)
}

/// [`render_with_gradients`] with a custom validity threshold; the loss is
/// taken over pixels whose accumulated weight reaches `min_weight`.
pub fn render_with_gradients_at(
    set: &GaussianSet,
    cam: &Camera,
    targets: &ReconTargets,
    weights: &LossWeights,
    min_weight: f64,
) -> Result<(Stage1Loss, GradientBundle)> {
    if targets.width() != cam.width || targets.height() != cam.height {
        return Err(Error::invalid(format!(
            "targets are {}x{} but camera is {}x{}",
            targets.width(),
            targets.height(),
            cam.width,
            cam.height
        )));
    }
    targets.check_shape(cam.width, cam.height)?;
    if targets.labels.valid.iter().zip(&targets.labels.labels).any(|(v, l)| *v && *l >= set.class_count()) {
        return Err(Error::invalid("label id exceeds class count"));
    }
    let view = PreparedView::new(set, cam);
    let (depth, sem) = render_prepared(&view, set, min_weight);
    let loss = stage1_loss(&depth, &sem, targets, weights)?;
    let up = stage1_upstream(&depth, &sem, targets, weights);
    let grads = backward(&view, set, &up.depth, &up.logits);
    Ok((loss, grads))
}

/// Backpropagates per-pixel gradients of rendered depth and logits.
pub(crate) fn backward(
    view: &PreparedView<'_>,
    set: &GaussianSet,
    g_depth: &[f64],
    g_logits: &[f64],
) -> GradientBundle {
    let c = set.class_count();
    let width = view.cam.width;
    // Per-tile partials, merged below in tile order.
    let partials: Vec<Vec<SplatGrad>> = (0..view.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &view.tiles[tile];
            let mut local = vec![SplatGrad::zero(c); list.len()];
            let mut pos = vec![usize::MAX; view.projected.len()];
            for (j, &slot) in list.iter().enumerate() {
                pos[slot] = j;
            }
            let mut buf = Vec::new();
            for (u, v) in view.tile_pixels(tile) {
                let i = v * width + u;
                let gd = g_depth[i];
                let gs = &g_logits[i * c..(i + 1) * c];
                if gd == 0.0 && gs.iter().all(|x| *x == 0.0) {
                    continue;
                }
                view.contributions(tile, u, v, &mut buf);
                let mut after_depth = 0.0;
                let mut after_logits = vec![0.0; c];
                for k in buf.iter().rev() {
                    let p = &view.projected[k.slot];
                    let src = &set.gaussians()[p.source_index].logits;
                    let t = k.transmittance;
                    let w = k.alpha * t;
                    let one_minus = 1.0 - k.alpha;
                    let mut g_alpha = gd * (p.depth * t - after_depth / one_minus);
                    for ch in 0..c {
                        g_alpha += gs[ch] * (src[ch] * t - after_logits[ch] / one_minus);
                    }
                    let acc = &mut local[pos[k.slot]];
                    acc.depth += gd * w;
                    for ch in 0..c {
                        acc.logits[ch] += gs[ch] * w;
                    }
                    if !k.clamped {
                        acc.opacity += g_alpha * k.density;
                        let g_density = g_alpha * p.opacity;
                        let gg = g_density * k.density;
                        // power = -½ dᵀ A d, d = pixel - mean2d
                        acc.mean2d += gg * (p.conic * k.offset);
                        acc.conic += -0.5 * gg * (k.offset * k.offset.transpose());
                    }
                    after_depth += p.depth * w;
                    for ch in 0..c {
                        after_logits[ch] += src[ch] * w;
                    }
                }
            }
            local
        })
        .collect();

    let mut screen = vec![SplatGrad::zero(c); view.projected.len()];
    for (tile, local) in partials.iter().enumerate() {
        for (j, g) in local.iter().enumerate() {
            screen[view.tiles[tile][j]].add(g);
        }
    }

    let mut out = GradientBundle::zeros(set);
    let cam = view.cam;
    let cam_from_world = cam.cam_from_world();
    let w_rot = cam_from_world.rotation();
    for (p, sg) in view.projected.iter().zip(&screen) {
        let k = p.source_index;
        let gauss = &set.gaussians()[k];
        let (tx, ty, tz) = (p.cam_point.x, p.cam_point.y, p.cam_point.z);

        // conic = cov2d⁻¹
        let g_cov2d = -(p.conic * sg.conic * p.conic);
        let g_cov2d = (g_cov2d + g_cov2d.transpose()) * 0.5;
        let sigma = gauss.covariance();
        let m = p.jw;
        let g_sigma = m.transpose() * g_cov2d * m;
        let g_m = 2.0 * g_cov2d * m * sigma;
        let g_j = g_m * w_rot.transpose();

        let mut gt = Vector3::zeros();
        let (fx, fy) = (cam.fx, cam.fy);
        let tz2 = tz * tz;
        let tz3 = tz2 * tz;
        gt.x += g_j[(0, 2)] * (-fx / tz2);
        gt.y += g_j[(1, 2)] * (-fy / tz2);
        gt.z += g_j[(0, 0)] * (-fx / tz2)
            + g_j[(0, 2)] * (2.0 * fx * tx / tz3)
            + g_j[(1, 1)] * (-fy / tz2)
            + g_j[(1, 2)] * (2.0 * fy * ty / tz3);
        gt.x += sg.mean2d.x * fx / tz;
        gt.z += sg.mean2d.x * (-fx * tx / tz2);
        gt.y += sg.mean2d.y * fy / tz;
        gt.z += sg.mean2d.y * (-fy * ty / tz2);
        gt.z += sg.depth;
        out.mean[k] = w_rot.transpose() * gt;

        // Σ = R diag(s²) Rᵀ
        let q = gauss.rotation();
        let r = q.to_rotation_matrix();
        let s = gauss.scale();
        let s2 = Matrix3::from_diagonal(&s.map(|v| v * v));
        let g_r = 2.0 * g_sigma * r * s2;
        let local = r.transpose() * g_sigma * r;
        out.log_scale[k] = Vector3::new(
            2.0 * s.x * s.x * local[(0, 0)],
            2.0 * s.y * s.y * local[(1, 1)],
            2.0 * s.z * s.z * local[(2, 2)],
        );
        out.rotation[k] = q.rotation_matrix_vjp(&g_r);

        let o = p.opacity;
        out.opacity_logit[k] = sg.opacity * o * (1.0 - o);
        out.logits[k].clone_from(&sg.logits);
    }
    out
}

impl GradientBundle {
    /// Flattened in the [`GaussianSet::raw_params`] layout.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.len() {
            out.extend(self.mean[k].iter());
            out.extend(self.log_scale[k].iter());
            out.extend(self.rotation[k]);
            out.push(self.opacity_logit[k]);
            out.extend(self.logits[k].iter());
        }
        out
    }
}
