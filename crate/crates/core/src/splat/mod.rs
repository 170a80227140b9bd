//! Depth and semantic splatting.
//!
//! Gaussians are projected with the first-order (EWA) approximation, sorted
//! front to back by camera depth (ties by source index) and alpha-composited
//! per pixel over every footprint that covers the pixel centre.

mod backward;
mod image_io;

pub use backward::{render_with_gradients, render_with_gradients_at, GradientBundle};
pub use image_io::{
    read_f32_grid, write_depth_pgm, write_f32_grid, write_semantic_ppm, PALETTE,
};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

use crate::geometry::{Camera, GaussianSet, Pose};

/// Means closer than this (camera z, metres) are culled.
pub const NEAR_PLANE: f64 = 0.1;
/// Per-splat alpha ceiling; keeps transmittance positive.
pub const ALPHA_MAX: f64 = 0.999;
/// Splats below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Added to the diagonal of every screen-space covariance (pixels²).
pub const COV2D_FLOOR: f64 = 0.3;
/// Footprints are truncated at this Mahalanobis radius.
pub const FOOTPRINT_SIGMA: f64 = 3.0;
/// A pixel reports depth only when its accumulated weight reaches this.
pub const VALID_WEIGHT: f64 = 0.5;

pub(crate) const TILE: usize = 16;

/// A Gaussian projected into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    /// Screen covariance including the [`COV2D_FLOOR`] regularisation.
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub source_index: usize,
    pub opacity: f64,
    /// Half extents of the 3σ ellipse's bounding box.
    pub radius: Vector2<f64>,
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) jw: Matrix2x3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticImage {
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    /// Pixel-major `[height][width][class]`.
    pub logits: Vec<f64>,
    pub weight: Vec<f64>,
    /// Accumulated weight at which a pixel counts as valid.
    pub min_weight: f64,
}

impl SemanticImage {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.logits[i * self.class_count..(i + 1) * self.class_count]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.weight[i] >= self.min_weight
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.pixel(i))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// First-order projection of one Gaussian; `None` when it is behind the
/// near plane or its 3σ footprint misses the image.
pub fn project_gaussian(
    g: &crate::geometry::Gaussian,
    source_index: usize,
    cam: &Camera,
) -> Option<Projected2D> {
    project_with(g, source_index, cam, &cam.cam_from_world())
}

fn project_with(
    g: &crate::geometry::Gaussian,
    source_index: usize,
    cam: &Camera,
    cam_from_world: &Pose,
) -> Option<Projected2D> {
    let t = cam_from_world.apply(&g.mean);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let j = Matrix2x3::new(
        cam.fx / tz,
        0.0,
        -cam.fx * tx / (tz * tz),
        0.0,
        cam.fy / tz,
        -cam.fy * ty / (tz * tz),
    );
    let jw = j * cam_from_world.rotation();
    let sigma = g.covariance();
    let mut cov2d = jw * sigma * jw.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    let conic = cov2d.try_inverse()?;
    let mean2d = Vector2::new(cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy);
    let radius = Vector2::new(
        FOOTPRINT_SIGMA * cov2d[(0, 0)].sqrt(),
        FOOTPRINT_SIGMA * cov2d[(1, 1)].sqrt(),
    );
    if mean2d.x + radius.x < 0.0
        || mean2d.x - radius.x > cam.width as f64
        || mean2d.y + radius.y < 0.0
        || mean2d.y - radius.y > cam.height as f64
    {
        return None;
    }
    Some(Projected2D {
        mean2d,
        cov2d,
        conic,
        depth: tz,
        source_index,
        opacity: g.opacity(),
        radius,
        cam_point: t,
        jw,
    })
}

/// Sorted projections plus per-tile candidate lists.
pub(crate) struct PreparedView<'a> {
    pub cam: &'a Camera,
    pub projected: Vec<Projected2D>,
    pub tiles_x: usize,
    pub tiles: Vec<Vec<usize>>,
}

impl<'a> PreparedView<'a> {
    pub fn new(set: &GaussianSet, cam: &'a Camera) -> Self {
        let cam_from_world = cam.cam_from_world();
        let mut projected: Vec<Projected2D> = set
            .iter()
            .enumerate()
            .filter_map(|(i, g)| project_with(g, i, cam, &cam_from_world))
            .collect();
        projected.sort_by(|a, b| {
            a.depth
                .total_cmp(&b.depth)
                .then(a.source_index.cmp(&b.source_index))
        });
        let tiles_x = cam.width.div_ceil(TILE);
        let tiles_y = cam.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (slot, p) in projected.iter().enumerate() {
            let x0 = ((p.mean2d.x - p.radius.x - 0.5).floor().max(0.0) as usize) / TILE;
            let y0 = ((p.mean2d.y - p.radius.y - 0.5).floor().max(0.0) as usize) / TILE;
            let x1 = ((p.mean2d.x + p.radius.x - 0.5).ceil().max(0.0) as usize / TILE).min(tiles_x - 1);
            let y1 = ((p.mean2d.y + p.radius.y - 0.5).ceil().max(0.0) as usize / TILE).min(tiles_y - 1);
            for ty in y0.min(tiles_y - 1)..=y1 {
                for tx in x0.min(tiles_x - 1)..=x1 {
                    tiles[ty * tiles_x + tx].push(slot);
                }
            }
        }
        PreparedView {
            cam,
            projected,
            tiles_x,
            tiles,
        }
    }

    pub fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (w, h) = (self.cam.width, self.cam.height);
        let xs = tx * TILE..((tx + 1) * TILE).min(w);
        let ys = ty * TILE..((ty + 1) * TILE).min(h);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }

    /// Front-to-back contributions at pixel `(u, v)` of `tile`.
    pub fn contributions(&self, tile: usize, u: usize, v: usize, out: &mut Vec<Contribution>) {
        out.clear();
        let (px, py) = crate::geometry::pixel_center(u, v);
        let mut transmittance = 1.0;
        for &slot in &self.tiles[tile] {
            let p = &self.projected[slot];
            let dx = px - p.mean2d.x;
            let dy = py - p.mean2d.y;
            if dx.abs() > p.radius.x || dy.abs() > p.radius.y {
                continue;
            }
            let a = p.conic[(0, 0)];
            let b = p.conic[(0, 1)];
            let c = p.conic[(1, 1)];
            let m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
            if m2 > FOOTPRINT_SIGMA * FOOTPRINT_SIGMA {
                continue;
            }
            let g = (-0.5 * m2).exp();
            let raw = p.opacity * g;
            if raw < ALPHA_MIN {
                continue;
            }
            let clamped = raw > ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw };
            out.push(Contribution {
                slot,
                alpha,
                density: g,
                clamped,
                offset: Vector2::new(dx, dy),
                transmittance,
            });
            transmittance *= 1.0 - alpha;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub slot: usize,
    pub alpha: f64,
    pub density: f64,
    pub clamped: bool,
    pub offset: Vector2<f64>,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

struct TileOutput {
    pixels: Vec<(usize, f64, f64)>,
    logits: Vec<f64>,
}

/// Renders accumulated depth and semantic logits.
pub fn render_views(set: &GaussianSet, cam: &Camera) -> (DepthImage, SemanticImage) {
    render_views_with(set, cam, VALID_WEIGHT)
}

/// [`render_views`] with a custom validity threshold.
pub fn render_views_with(set: &GaussianSet, cam: &Camera, min_weight: f64) -> (DepthImage, SemanticImage) {
    let view = PreparedView::new(set, cam);
    render_prepared(&view, set, min_weight)
}

pub(crate) fn render_prepared(
    view: &PreparedView<'_>,
    set: &GaussianSet,
    min_weight: f64,
) -> (DepthImage, SemanticImage) {
    let cam = view.cam;
    let c = set.class_count();
    let n = cam.pixel_count();
    let tiles: Vec<TileOutput> = (0..view.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let mut buf = Vec::new();
            let mut out = TileOutput {
                pixels: Vec::new(),
                logits: Vec::new(),
            };
            for (u, v) in view.tile_pixels(tile) {
                view.contributions(tile, u, v, &mut buf);
                let mut depth = 0.0;
                let mut weight = 0.0;
                let mut logits = vec![0.0; c];
                for k in &buf {
                    let p = &view.projected[k.slot];
                    let w = k.alpha * k.transmittance;
                    depth += p.depth * w;
                    weight += w;
                    let src = &set.gaussians()[p.source_index].logits;
                    for (acc, l) in logits.iter_mut().zip(src) {
                        *acc += l * w;
                    }
                }
                out.pixels.push((v * cam.width + u, depth, weight));
                out.logits.extend(logits);
            }
            out
        })
        .collect();

    let mut depth = DepthImage::invalid(cam.width, cam.height);
    let mut sem = SemanticImage {
        width: cam.width,
        height: cam.height,
        class_count: c,
        logits: vec![0.0; n * c],
        weight: vec![0.0; n],
        min_weight,
    };
    for t in tiles {
        for (j, (i, d, w)) in t.pixels.into_iter().enumerate() {
            depth.depth[i] = d;
            depth.valid[i] = w >= min_weight;
            sem.weight[i] = w;
            sem.logits[i * c..(i + 1) * c].copy_from_slice(&t.logits[j * c..(j + 1) * c]);
        }
    }
    (depth, sem)
}

/// Hash of the discrete state of a render: which splats touch which pixels,
/// which of them hit the alpha clamp, and which pixels are valid. Two
/// parameter settings with equal signatures lie on the same smooth piece of
/// the loss.
pub fn render_signature(set: &GaussianSet, cam: &Camera) -> u64 {
    let view = PreparedView::new(set, cam);
    let per_tile: Vec<u64> = (0..view.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let mut h = DefaultHasher::new();
            let mut buf = Vec::new();
            for (u, v) in view.tile_pixels(tile) {
                view.contributions(tile, u, v, &mut buf);
                let mut weight = 0.0;
                for k in &buf {
                    view.projected[k.slot].source_index.hash(&mut h);
                    k.clamped.hash(&mut h);
                    weight += k.alpha * k.transmittance;
                }
                (weight >= VALID_WEIGHT).hash(&mut h);
                u32::MAX.hash(&mut h);
            }
            h.finish()
        })
        .collect();
    let mut h = DefaultHasher::new();
    per_tile.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests;
